#pragma once

#include "air/ir.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace air {

struct MachineConfig {
  int core_rows = 4;
  int core_cols = 4;
  int memtile_count = 4;
  int shim_port_count = 4;
  std::int64_t l1_bytes = 65536;
  std::int64_t l2_bytes_per_memtile = 524288;
  int dma_in_per_core = 2;
  int dma_out_per_core = 2;
  int dma_in_per_memtile = 6;
  int dma_out_per_memtile = 6;
  std::int64_t stream_bytes_per_cycle = 4;
  int stream_fifo_words = 4;
  std::map<ElemKind, std::int64_t> macs_per_cycle = {
      {ElemKind::I8, 256}, {ElemKind::I16, 128}, {ElemKind::I32, 32},
      {ElemKind::F32, 16}, {ElemKind::BF16, 128},
  };
  std::int64_t dispatch_overhead_cycles = 0;
  std::int64_t bd_setup_cycles = 4;

  std::string to_json() const;
  static MachineConfig from_json(const std::string &text);
};

// ---------------------------------------------------------------------------
// Machine addressing

struct TileId {
  enum class Kind { Core, Memtile, Shim, Host };
  Kind kind = Kind::Host;
  int row = 0, col = 0; // memtile/shim use col only

  std::string str() const;
  bool operator<(const TileId &o) const {
    return std::tie(kind, row, col) < std::tie(o.kind, o.row, o.col);
  }
  bool operator==(const TileId &o) const {
    return kind == o.kind && row == o.row && col == o.col;
  }
};

// A DMA port: `into` means the stream writes into this tile's memory (W
// ports); otherwise it reads out of it (R ports).
struct Port {
  TileId tile;
  bool into = true;
  int index = 0;

  std::string tid() const { return (into ? "W" : "R") + std::to_string(index); }
  bool operator<(const Port &o) const {
    return std::tie(tile, into, index) < std::tie(o.tile, o.into, o.index);
  }
  bool operator==(const Port &o) const {
    return tile == o.tile && into == o.into && index == o.index;
  }
};

// ---------------------------------------------------------------------------
// Lowered artifacts

struct Lock {
  int id = 0;
  TileId tile;
  std::int64_t initial = 0;
  std::string buffer; // guarded buffer instance
  bool producer_side = true;
};

struct LockAction {
  int lock = -1;
  std::int64_t amount = 1;
  bool acquire = true;
};

// One resolved transfer instance (pre-coalescing); BDs are built from runs
// of these and the simulator expands them back.
struct TransferInst {
  std::string buffer;                           // buffer instance key
  std::vector<std::array<std::int64_t, 3>> dims; // (offset, size, stride)
  std::vector<LockAction> before, after;
  std::int64_t bytes_acct = 0; // accounting bytes (bf16 counts 2)
};

struct BufferDescriptor {
  int id = 0;
  std::string buffer;
  std::vector<std::array<std::int64_t, 3>> dims; // <= 4, outermost first
  std::int64_t repeat = 1;
  bool to_stream = false; // direction
  Port port;
  std::string channel;
  int element = 0;
  std::vector<LockAction> before, after;       // per repeat
  std::vector<LockAction> final_after;         // after the last repeat
  std::vector<std::string> buffer_cycle;       // per-repeat buffer rotation
  std::int64_t bytes_per_repeat = 0;           // accounting bytes
  bool outer_is_repeat = false;                // dims[0] advances per repeat
  int launch = 0;
  const Operation *op = nullptr;               // originating channel op

  std::int64_t total_bytes() const { return bytes_per_repeat * repeat; }
  // Flat element addresses of one repeat, in stream order.
  std::vector<std::int64_t> enumerate() const;
};

struct Route {
  std::string channel;
  int element = 0; // source element ordinal
  Port src;
  std::vector<Port> dsts; // >1 iff broadcast set present
};

// One entry of a device-side port queue: the k-th repeat of a BD.
struct QueueEntry {
  int bd = -1;      // index into PlacedProgram::bds (-1: host-side transfer)
  int host = -1;    // index into host_transfers
  int rep = 0;
  int seq = 0;      // pairing sequence number within (channel, element)
};

// Host/shim-side transfer (runtime-managed DMA).
struct HostTransfer {
  std::string buffer; // L3 buffer name
  std::vector<std::array<std::int64_t, 3>> dims;
  Port port;
  std::string channel;
  int element = 0;
  bool to_stream = false;
  std::int64_t bytes_acct = 0;
  int launch = 0; // gated by this dispatch
  std::vector<std::int64_t> enumerate() const;
};

struct CoreInstr {
  enum class Kind { Acquire, Release, Kernel, Inline };
  Kind kind = Kind::Kernel;
  LockAction lock;
  const Operation *op = nullptr;      // kernel_call or inline compute loop
  std::map<int, std::int64_t> env;    // outer index bindings for this instance
  std::map<int, std::string> buffers; // buffer value id -> instance key
  std::int64_t cycles = 0;
  std::string label;
  int launch = 0;
};

struct Placement {
  // herd op -> top-left (row, col)
  std::map<const Operation *, std::pair<int, int>> herds;
  // L2 alloc op -> memtile index
  std::map<const Operation *, int> l2_memtile;
};

struct RuntimeEntry {
  enum class Kind { Dispatch, Wait };
  Kind kind = Kind::Dispatch;
  int launch = 0;
  std::int64_t cost = 0;
};

struct PlacedProgram {
  MachineConfig config;
  Program program; // owns the Operations the instrs reference
  Placement placement;
  std::map<std::string, std::pair<TileId, std::int64_t>> buffer_homes; // instance -> (tile, byte offset)
  std::map<std::string, MemRefType> buffer_types;
  std::vector<Lock> locks;
  std::vector<BufferDescriptor> bds;
  std::vector<HostTransfer> host_transfers;
  std::vector<Route> routes;
  std::map<Port, std::vector<QueueEntry>> port_queues;
  std::map<TileId, std::vector<CoreInstr>> core_programs;
  std::vector<RuntimeEntry> runtime_sequence;
  int num_launches = 0;

  std::string to_json() const; // versioned document, schema in docs
};

// ---------------------------------------------------------------------------
// Operations

/// Greedy first-fit placement of herd rectangles, row-major from (0,0);
/// throws Error("PlacementFailure").
Placement place_herds(const Program &p, const MachineConfig &cfg);

/// Bump allocation with 64-byte alignment per worker tile; memtiles round
/// robin. Throws Error("CapacityExceeded").
void allocate_buffers(const Program &p, const MachineConfig &cfg, PlacedProgram &out);

/// Full lowering: placement, buffers, channel routes/BDs/locks, per-core
/// programs, runtime sequence. Throws Error("BDDimOverflow") and the
/// sub-pass errors.
PlacedProgram compile(const Program &p, const MachineConfig &cfg);

} // namespace air
