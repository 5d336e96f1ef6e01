#include "air/error.hpp"
#include "air/ir.hpp"

#include <cctype>
#include <map>
#include <sstream>
#include <vector>

namespace air {

namespace {

enum class Tok {
  End,
  Ident,    // bare word
  ValueId,  // %name
  SymbolId, // @name
  Int,
  Float,
  String,
  AffineMapTok, // affine_map<...>
  AffineSetTok, // affine_set<...>
  Punct,
};

struct Token {
  Tok kind = Tok::End;
  std::string text;
  std::int64_t ival = 0;
  double fval = 0;
  char punct = 0;
  int line = 1, col = 1;
};

class Lexer {
public:
  Lexer(const std::string &text, std::string file)
      : text_(text), file_(std::move(file)) {
    next();
  }

  const Token &tok() const { return tok_; }
  const std::string &file() const { return file_; }

  [[noreturn]] void fail(const std::string &expected) const {
    std::ostringstream os;
    os << file_ << ":" << tok_.line << ":" << tok_.col << ": error: expected "
       << expected << ", got '" << (tok_.kind == Tok::End ? "<eof>" : tok_.text)
       << "'";
    throw Error("SyntaxError", os.str());
  }

  void next() {
    skip_ws();
    tok_ = Token{};
    tok_.line = line_;
    tok_.col = col_;
    if (pos_ >= text_.size()) {
      tok_.kind = Tok::End;
      return;
    }
    char c = text_[pos_];
    if (c == '%' || c == '@') {
      advance();
      std::string name;
      while (pos_ < text_.size() && (std::isalnum(uc()) || text_[pos_] == '_' ||
                                     text_[pos_] == '.')) {
        name += text_[pos_];
        advance();
      }
      if (name.empty())
        fail_here("identifier after sigil");
      tok_.kind = c == '%' ? Tok::ValueId : Tok::SymbolId;
      tok_.text = name;
      return;
    }
    if (std::isalpha(uc()) || c == '_') {
      std::string word;
      while (pos_ < text_.size() && (std::isalnum(uc()) || text_[pos_] == '_' ||
                                     text_[pos_] == '.')) {
        word += text_[pos_];
        advance();
      }
      if (word == "affine_map" || word == "affine_set") {
        // Slurp the balanced <...> that follows.
        skip_ws();
        if (pos_ >= text_.size() || text_[pos_] != '<')
          fail_here("'<' after " + word);
        int depth = 0;
        std::string body = word;
        char prev = 0;
        do {
          if (text_[pos_] == '<')
            ++depth;
          else if (text_[pos_] == '>' && prev != '-') // '->' is not a closer
            --depth;
          prev = text_[pos_];
          body += text_[pos_];
          advance();
        } while (depth > 0 && pos_ < text_.size());
        if (depth != 0)
          fail_here("balanced '>'");
        tok_.kind = word == "affine_map" ? Tok::AffineMapTok : Tok::AffineSetTok;
        tok_.text = body;
        return;
      }
      tok_.kind = Tok::Ident;
      tok_.text = word;
      return;
    }
    if (std::isdigit(uc()) || (c == '-' && pos_ + 1 < text_.size() &&
                               std::isdigit(static_cast<unsigned char>(text_[pos_ + 1])))) {
      std::string num;
      if (c == '-') {
        num += c;
        advance();
      }
      bool is_float = false;
      while (pos_ < text_.size() && (std::isdigit(uc()) || text_[pos_] == '.')) {
        if (text_[pos_] == '.')
          is_float = true;
        num += text_[pos_];
        advance();
      }
      tok_.text = num;
      if (is_float) {
        tok_.kind = Tok::Float;
        tok_.fval = std::stod(num);
      } else {
        tok_.kind = Tok::Int;
        tok_.ival = std::stoll(num);
      }
      return;
    }
    if (c == '"') {
      advance();
      std::string s;
      while (pos_ < text_.size() && text_[pos_] != '"') {
        s += text_[pos_];
        advance();
      }
      if (pos_ >= text_.size())
        fail_here("closing '\"'");
      advance();
      tok_.kind = Tok::String;
      tok_.text = s;
      return;
    }
    tok_.kind = Tok::Punct;
    tok_.punct = c;
    tok_.text = std::string(1, c);
    advance();
  }

private:
  unsigned char uc() const { return static_cast<unsigned char>(text_[pos_]); }

  void advance() {
    if (text_[pos_] == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    ++pos_;
  }

  void skip_ws() {
    while (pos_ < text_.size()) {
      if (std::isspace(uc())) {
        advance();
      } else if (text_[pos_] == '/' && pos_ + 1 < text_.size() &&
                 text_[pos_ + 1] == '/') {
        while (pos_ < text_.size() && text_[pos_] != '\n')
          advance();
      } else {
        break;
      }
    }
  }

  [[noreturn]] void fail_here(const std::string &expected) const {
    std::ostringstream os;
    os << file_ << ":" << line_ << ":" << col_ << ": error: expected " << expected;
    throw Error("SyntaxError", os.str());
  }

  const std::string &text_;
  std::string file_;
  std::size_t pos_ = 0;
  int line_ = 1, col_ = 1;
  Token tok_;
};

class Parser {
public:
  Parser(const std::string &text, const std::string &file) : lex_(text, file) {
    program_.source_name = file;
  }

  Program parse() {
    expect_ident("module");
    expect_punct('{');
    auto &body = program_.body();
    push_scope();
    while (!is_punct('}')) {
      if (is_ident("air.channel")) {
        body.ops.push_back(parse_channel_decl());
      } else if (is_ident("func")) {
        body.ops.push_back(parse_func());
      } else {
        lex_.fail("'air.channel', 'func', or '}'");
      }
    }
    expect_punct('}');
    pop_scope();
    if (lex_.tok().kind != Tok::End)
      lex_.fail("end of input");
    return std::move(program_);
  }

private:
  // --- token helpers -------------------------------------------------------

  bool is_punct(char c) const {
    return lex_.tok().kind == Tok::Punct && lex_.tok().punct == c;
  }
  bool is_ident(const std::string &w) const {
    return lex_.tok().kind == Tok::Ident && lex_.tok().text == w;
  }
  bool eat_punct(char c) {
    if (!is_punct(c))
      return false;
    lex_.next();
    return true;
  }
  bool eat_ident(const std::string &w) {
    if (!is_ident(w))
      return false;
    lex_.next();
    return true;
  }
  void expect_punct(char c) {
    if (!eat_punct(c))
      lex_.fail(std::string("'") + c + "'");
  }
  void expect_ident(const std::string &w) {
    if (!eat_ident(w))
      lex_.fail("'" + w + "'");
  }
  std::int64_t expect_int() {
    if (lex_.tok().kind != Tok::Int)
      lex_.fail("integer");
    std::int64_t v = lex_.tok().ival;
    lex_.next();
    return v;
  }
  std::string expect_symbol() {
    if (lex_.tok().kind != Tok::SymbolId)
      lex_.fail("'@symbol'");
    std::string s = lex_.tok().text;
    lex_.next();
    return s;
  }
  std::string expect_value_name() {
    if (lex_.tok().kind != Tok::ValueId)
      lex_.fail("'%value'");
    std::string s = lex_.tok().text;
    lex_.next();
    return s;
  }
  SrcLoc loc() const { return {lex_.tok().line, lex_.tok().col}; }

  [[noreturn]] void fail_at(SrcLoc l, const std::string &code, const std::string &msg) {
    std::ostringstream os;
    os << lex_.file() << ":" << l.line << ":" << l.col << ": error: " << msg;
    throw Error(code, os.str());
  }

  // --- scopes --------------------------------------------------------------

  void push_scope() { scopes_.emplace_back(); }
  void pop_scope() { scopes_.pop_back(); }

  Value define(const std::string &name, Type t, SrcLoc l) {
    Value v = program_.new_value(std::move(t));
    (void)l;
    scopes_.back()[name] = v;
    return v;
  }

  Value lookup(const std::string &name, SrcLoc l) {
    for (auto it = scopes_.rbegin(); it != scopes_.rend(); ++it) {
      auto f = it->find(name);
      if (f != it->end())
        return f->second;
    }
    fail_at(l, "UnknownSymbol", "use of undefined value %" + name);
  }

  // --- types ---------------------------------------------------------------

  Type parse_type() {
    SrcLoc l = loc();
    if (eat_ident("index"))
      return Type::index();
    if (eat_ident("token"))
      return Type::token();
    if (is_ident("memref")) {
      lex_.next();
      expect_punct('<');
      MemRefType m;
      // ints separated by 'x', then elem kind glued in the last word:
      // memref<4x16xi32, L1>. The lexer splits "4x16xi32" into Int("4"),
      // Ident("x16xi32")? No: '4' lexes as Int, then "x16xi32" as Ident.
      // Parse robustly: sequence of Int + Ident pieces.
      std::vector<std::int64_t> dims;
      ElemKind elem = ElemKind::I32;
      bool have_elem = false;
      while (!is_punct(',') && !is_punct('>')) {
        if (lex_.tok().kind == Tok::Int) {
          dims.push_back(lex_.tok().ival);
          lex_.next();
        } else if (lex_.tok().kind == Tok::Ident) {
          std::string w = lex_.tok().text;
          lex_.next();
          // w looks like "x16xi32" or "xi32" or "i32".
          std::size_t i = 0;
          while (i < w.size()) {
            if (w[i] == 'x') {
              ++i;
              std::size_t j = i;
              while (j < w.size() && std::isdigit(static_cast<unsigned char>(w[j])))
                ++j;
              if (j > i && j < w.size() && w[j] == 'x') {
                dims.push_back(std::stoll(w.substr(i, j - i)));
                i = j;
                continue;
              }
              if (j > i && j == w.size()) {
                dims.push_back(std::stoll(w.substr(i, j - i)));
                i = j;
                continue;
              }
              // rest is elem kind possibly with digits (i32)
              auto ek = parse_elem_kind(w.substr(i));
              if (!ek)
                fail_at(l, "SyntaxError", "bad element type in memref: " + w.substr(i));
              elem = *ek;
              have_elem = true;
              i = w.size();
            } else {
              auto ek = parse_elem_kind(w.substr(i));
              if (!ek)
                fail_at(l, "SyntaxError", "bad element type in memref: " + w.substr(i));
              elem = *ek;
              have_elem = true;
              i = w.size();
            }
          }
        } else {
          lex_.fail("memref shape");
        }
      }
      if (!have_elem)
        fail_at(l, "SyntaxError", "memref missing element type");
      m.shape = dims;
      m.elem = elem;
      m.space = MemorySpace::L3;
      if (eat_punct(',')) {
        if (eat_ident("L1"))
          m.space = MemorySpace::L1;
        else if (eat_ident("L2"))
          m.space = MemorySpace::L2;
        else if (eat_ident("L3"))
          m.space = MemorySpace::L3;
        else
          lex_.fail("memory space");
      }
      expect_punct('>');
      if (m.shape.empty())
        fail_at(l, "SyntaxError", "memref needs at least one dimension");
      return Type::memref_of(std::move(m));
    }
    if (lex_.tok().kind == Tok::Ident) {
      if (auto ek = parse_elem_kind(lex_.tok().text)) {
        lex_.next();
        return Type::scalar_of(*ek);
      }
    }
    lex_.fail("type");
  }

  // --- common clauses ------------------------------------------------------

  std::vector<Value> parse_value_list_paren(TypeKind required, const char *what) {
    std::vector<Value> out;
    expect_punct('(');
    if (!eat_punct(')')) {
      do {
        SrcLoc l = loc();
        Value v = lookup(expect_value_name(), l);
        if (v.type.kind != required)
          fail_at(l, "TypeMismatch", std::string(what) + " entries must be " +
                                         (required == TypeKind::Token ? "tokens"
                                                                      : "typed values"));
        out.push_back(v);
      } while (eat_punct(','));
      expect_punct(')');
    }
    return out;
  }

  void parse_async_clauses(Operation &op) {
    if (eat_ident("async"))
      op.is_async = true;
    while (true) {
      if (eat_ident("deps"))
        op.deps = parse_value_list_paren(TypeKind::Token, "deps");
      else if (eat_ident("concur"))
        op.concurs = parse_value_list_paren(TypeKind::Token, "concur");
      else if (eat_ident("affinity"))
        op.affinities = parse_value_list_paren(TypeKind::Token, "affinity");
      else
        break;
    }
  }

  void parse_attrs(Operation &op) {
    if (!eat_ident("attrs"))
      return;
    expect_punct('{');
    if (!eat_punct('}')) {
      do {
        if (lex_.tok().kind != Tok::Ident)
          lex_.fail("attribute name");
        std::string key = lex_.tok().text;
        lex_.next();
        expect_punct('=');
        switch (lex_.tok().kind) {
        case Tok::Int:
          op.attrs[key] = lex_.tok().ival;
          lex_.next();
          break;
        case Tok::Float:
          op.attrs[key] = lex_.tok().fval;
          lex_.next();
          break;
        case Tok::String:
          op.attrs[key] = lex_.tok().text;
          lex_.next();
          break;
        case Tok::AffineMapTok:
          op.attrs[key] = parse_affine_map(lex_.tok().text);
          lex_.next();
          break;
        case Tok::AffineSetTok:
          op.attrs[key] = parse_affine_set(lex_.tok().text);
          lex_.next();
          break;
        default:
          lex_.fail("attribute value");
        }
      } while (eat_punct(','));
      expect_punct('}');
    }
  }

  IndexExpr parse_index_expr() {
    if (lex_.tok().kind == Tok::Int) {
      std::int64_t v = lex_.tok().ival;
      lex_.next();
      return IndexExpr(v);
    }
    SrcLoc l = loc();
    Value v = lookup(expect_value_name(), l);
    if (v.type.kind != TypeKind::Index)
      fail_at(l, "TypeMismatch", "access pattern entries must be index-typed");
    return IndexExpr(v);
  }

  std::vector<IndexExpr> parse_index_list_bracket() {
    std::vector<IndexExpr> out;
    expect_punct('[');
    if (!eat_punct(']')) {
      do {
        out.push_back(parse_index_expr());
      } while (eat_punct(','));
      expect_punct(']');
    }
    return out;
  }

  BufferView parse_view() {
    SrcLoc l = loc();
    BufferView v;
    v.buffer = lookup(expect_value_name(), l);
    if (v.buffer.type.kind != TypeKind::MemRef)
      fail_at(l, "TypeMismatch", "view base must be a memref value");
    if (is_punct('[')) {
      v.offsets = parse_index_list_bracket();
      v.sizes = parse_index_list_bracket();
      v.strides = parse_index_list_bracket();
    }
    return v;
  }

  std::vector<BufferView> parse_view_list_paren() {
    std::vector<BufferView> out;
    expect_punct('(');
    if (!eat_punct(')')) {
      do {
        out.push_back(parse_view());
      } while (eat_punct(','));
      expect_punct(')');
    }
    return out;
  }

  void parse_region_into(Operation &op, Region &r) {
    (void)op;
    expect_punct('{');
    push_scope();
    // region args were already defined by the caller into the new scope via
    // define_region_arg.
    for (const auto &pending : pending_args_)
      scopes_.back()[pending.first] = pending.second;
    pending_args_.clear();
    while (!is_punct('}'))
      r.ops.push_back(parse_op());
    expect_punct('}');
    pop_scope();
  }

  // Queues a region argument binding for the next parse_region_into call.
  Value queue_region_arg(Region &r, const std::string &name, Type t) {
    Value v = program_.new_value(std::move(t));
    r.args.push_back(v);
    pending_args_.emplace_back(name, v);
    return v;
  }

  // --- operations ----------------------------------------------------------

  std::unique_ptr<Operation> parse_channel_decl() {
    auto op = make_op(OpKind::ChannelDecl);
    op->loc = loc();
    expect_ident("air.channel");
    op->symbol = expect_symbol();
    expect_punct('[');
    do {
      op->extents.push_back(expect_int());
    } while (eat_punct(','));
    expect_punct(']');
    if (program_.find_channel(op->symbol) &&
        program_.find_channel(op->symbol) != op.get())
      fail_at(op->loc, "UnknownSymbol", "duplicate channel @" + op->symbol);
    return op;
  }

  std::unique_ptr<Operation> parse_func() {
    auto op = make_op(OpKind::Func);
    op->loc = loc();
    expect_ident("func");
    op->symbol = expect_symbol();
    op->regions.emplace_back();
    expect_punct('(');
    if (!eat_punct(')')) {
      do {
        std::string name = expect_value_name();
        expect_punct(':');
        Type t = parse_type();
        queue_region_arg(op->regions[0], name, t);
        op->arg_names.push_back(name);
      } while (eat_punct(','));
      expect_punct(')');
    }
    parse_region_into(*op, op->regions[0]);
    return op;
  }

  std::unique_ptr<Operation> parse_op() {
    // Optional results.
    std::vector<std::string> result_names;
    if (lex_.tok().kind == Tok::ValueId) {
      result_names.push_back(expect_value_name());
      while (eat_punct(','))
        result_names.push_back(expect_value_name());
      expect_punct('=');
    }
    if (lex_.tok().kind != Tok::Ident)
      lex_.fail("operation name");
    const std::string name = lex_.tok().text;
    SrcLoc l = loc();
    std::unique_ptr<Operation> op;

    if (name == "air.launch")
      op = parse_launch();
    else if (name == "air.segment")
      op = parse_segment();
    else if (name == "air.herd")
      op = parse_herd();
    else if (name == "scf.for")
      op = parse_for();
    else if (name == "scf.parallel" || name == "scf.forall")
      op = parse_parallel();
    else if (name == "scf.yield" || name == "scf.reduce")
      op = parse_yield();
    else if (name == "air.channel.put" || name == "air.channel.get")
      op = parse_channel_op(name == "air.channel.put");
    else if (name == "air.memcpy")
      op = parse_memcpy();
    else if (name == "air.alloc")
      op = parse_alloc();
    else if (name == "air.dealloc")
      op = parse_dealloc();
    else if (name == "air.wait_all")
      op = parse_wait_all();
    else if (name == "air.kernel")
      op = parse_kernel();
    else if (name == "affine.apply")
      op = parse_apply();
    else if (name == "arith.const")
      op = parse_const();
    else if (name == "arith.add" || name == "arith.mul")
      op = parse_arith(name == "arith.add");
    else if (name == "memref.load")
      op = parse_load();
    else if (name == "memref.store")
      op = parse_store();
    else
      lex_.fail("known operation");

    op->loc = l;

    // Bind declared result names to the op's result values.
    std::vector<Type> result_types = result_signature(*op);
    if (result_names.size() != result_types.size())
      fail_at(l, "TypeMismatch",
              op_name(op->kind) + " produces " + std::to_string(result_types.size()) +
                  " results, " + std::to_string(result_names.size()) + " bound");
    for (std::size_t i = 0; i < result_names.size(); ++i)
      op->results.push_back(define(result_names[i], result_types[i], l));
    return op;
  }

  // Computes the result type list for a parsed op (before results are bound).
  std::vector<Type> result_signature(const Operation &op) {
    std::vector<Type> out;
    switch (op.kind) {
    case OpKind::Alloc:
      out.push_back(Type::memref_of(op.alloc_type));
      break;
    case OpKind::ScfFor:
      for (std::size_t i = 0; i < op.iter_init.size(); ++i)
        out.push_back(Type::token());
      return out; // never async itself
    case OpKind::ScfParallel:
      if (!op.iter_init.empty())
        out.push_back(Type::token());
      return out;
    case OpKind::AffineApply:
      out.push_back(Type::index());
      return out;
    case OpKind::ArithConst:
      out.push_back(op.const_type);
      return out;
    case OpKind::ArithAdd:
    case OpKind::ArithMul:
      out.push_back(op.const_type);
      return out;
    case OpKind::Load:
      out.push_back(Type::scalar_of(op.buffer.type.memref.elem));
      return out;
    default:
      break;
    }
    if (op.is_async)
      out.push_back(Type::token());
    return out;
  }

  std::unique_ptr<Operation> parse_launch() {
    auto op = make_op(OpKind::Launch);
    expect_ident("air.launch");
    parse_async_clauses(*op);
    op->regions.emplace_back();
    if (is_punct('(')) {
      expect_punct('(');
      std::vector<std::string> ivs;
      do {
        ivs.push_back(expect_value_name());
      } while (eat_punct(','));
      expect_punct(')');
      expect_ident("in");
      expect_punct('[');
      do {
        op->extents.push_back(expect_int());
      } while (eat_punct(','));
      expect_punct(']');
      if (ivs.size() != op->extents.size())
        fail_at(op->loc, "TypeMismatch", "launch ivs and extents differ in count");
      for (const auto &n : ivs)
        queue_region_arg(op->regions[0], n, Type::index());
    }
    parse_attrs(*op);
    parse_region_into(*op, op->regions[0]);
    return op;
  }

  std::unique_ptr<Operation> parse_segment() {
    auto op = make_op(OpKind::Segment);
    expect_ident("air.segment");
    parse_async_clauses(*op);
    if (lex_.tok().kind == Tok::SymbolId)
      op->symbol = expect_symbol();
    parse_attrs(*op);
    op->regions.emplace_back();
    parse_region_into(*op, op->regions[0]);
    return op;
  }

  std::unique_ptr<Operation> parse_herd() {
    auto op = make_op(OpKind::Herd);
    expect_ident("air.herd");
    parse_async_clauses(*op);
    if (lex_.tok().kind == Tok::SymbolId)
      op->symbol = expect_symbol();
    expect_ident("tile");
    op->regions.emplace_back();
    expect_punct('(');
    std::string tx = expect_value_name();
    expect_punct(',');
    std::string ty = expect_value_name();
    expect_punct(')');
    expect_ident("in");
    expect_punct('[');
    op->extents.push_back(expect_int());
    expect_punct(',');
    op->extents.push_back(expect_int());
    expect_punct(']');
    queue_region_arg(op->regions[0], tx, Type::index());
    queue_region_arg(op->regions[0], ty, Type::index());
    parse_attrs(*op);
    parse_region_into(*op, op->regions[0]);
    return op;
  }

  std::unique_ptr<Operation> parse_for() {
    auto op = make_op(OpKind::ScfFor);
    expect_ident("scf.for");
    parse_async_clauses(*op);
    op->regions.emplace_back();
    std::string iv = expect_value_name();
    expect_punct('=');
    op->lb = expect_int();
    expect_ident("to");
    op->ub = expect_int();
    if (eat_ident("step"))
      op->step = expect_int();
    queue_region_arg(op->regions[0], iv, Type::index());
    if (eat_ident("iter_args")) {
      expect_punct('(');
      do {
        std::string an = expect_value_name();
        expect_punct('=');
        SrcLoc l = loc();
        Value init = lookup(expect_value_name(), l);
        if (init.type.kind != TypeKind::Token)
          fail_at(l, "TypeMismatch", "iter_args carry tokens");
        op->iter_init.push_back(init);
        queue_region_arg(op->regions[0], an, Type::token());
      } while (eat_punct(','));
      expect_punct(')');
    }
    parse_region_into(*op, op->regions[0]);
    return op;
  }

  std::unique_ptr<Operation> parse_parallel() {
    auto op = make_op(OpKind::ScfParallel);
    lex_.next(); // scf.parallel / scf.forall
    parse_async_clauses(*op);
    op->regions.emplace_back();
    expect_punct('(');
    std::vector<std::string> ivs;
    do {
      ivs.push_back(expect_value_name());
    } while (eat_punct(','));
    expect_punct(')');
    expect_ident("in");
    expect_punct('(');
    do {
      op->extents.push_back(expect_int());
    } while (eat_punct(','));
    expect_punct(')');
    if (ivs.size() != op->extents.size())
      fail_at(op->loc, "TypeMismatch", "parallel ivs and extents differ in count");
    for (const auto &n : ivs)
      queue_region_arg(op->regions[0], n, Type::index());
    if (eat_ident("init")) {
      expect_punct('(');
      std::string arg_name = expect_value_name();
      expect_punct('=');
      SrcLoc l = loc();
      Value init = lookup(expect_value_name(), l);
      if (init.type.kind != TypeKind::Token)
        fail_at(l, "TypeMismatch", "parallel init must be a token");
      op->iter_init.push_back(init);
      queue_region_arg(op->regions[0], arg_name, Type::token());
      expect_punct(')');
    }
    parse_region_into(*op, op->regions[0]);
    return op;
  }

  std::unique_ptr<Operation> parse_yield() {
    auto op = make_op(OpKind::ScfYield);
    lex_.next(); // scf.yield / scf.reduce
    while (lex_.tok().kind == Tok::ValueId) {
      SrcLoc l = loc();
      op->operands.push_back(lookup(expect_value_name(), l));
      if (!eat_punct(','))
        break;
    }
    return op;
  }

  std::unique_ptr<Operation> parse_channel_op(bool is_put) {
    auto op = make_op(is_put ? OpKind::ChannelPut : OpKind::ChannelGet);
    lex_.next();
    parse_async_clauses(*op);
    op->symbol = expect_symbol();
    if (!program_.find_channel(op->symbol))
      fail_at(loc(), "UnknownSymbol", "channel @" + op->symbol + " is not declared");
    if (is_punct('['))
      op->bundle_index = parse_index_list_bracket();
    expect_punct('(');
    op->views.push_back(parse_view());
    expect_punct(')');
    parse_attrs(*op);
    return op;
  }

  std::unique_ptr<Operation> parse_memcpy() {
    auto op = make_op(OpKind::Memcpy);
    expect_ident("air.memcpy");
    parse_async_clauses(*op);
    expect_punct('(');
    op->views.push_back(parse_view()); // dst
    expect_punct(',');
    op->views.push_back(parse_view()); // src
    expect_punct(')');
    return op;
  }

  std::unique_ptr<Operation> parse_alloc() {
    auto op = make_op(OpKind::Alloc);
    expect_ident("air.alloc");
    parse_async_clauses(*op);
    parse_attrs(*op);
    expect_punct(':');
    SrcLoc l = loc();
    Type t = parse_type();
    if (t.kind != TypeKind::MemRef)
      fail_at(l, "TypeMismatch", "alloc type must be a memref");
    op->alloc_type = t.memref;
    return op;
  }

  std::unique_ptr<Operation> parse_dealloc() {
    auto op = make_op(OpKind::Dealloc);
    expect_ident("air.dealloc");
    parse_async_clauses(*op);
    SrcLoc l = loc();
    op->buffer = lookup(expect_value_name(), l);
    if (op->buffer.type.kind != TypeKind::MemRef)
      fail_at(l, "TypeMismatch", "dealloc takes a memref");
    return op;
  }

  std::unique_ptr<Operation> parse_wait_all() {
    auto op = make_op(OpKind::WaitAll);
    expect_ident("air.wait_all");
    parse_async_clauses(*op);
    return op;
  }

  std::unique_ptr<Operation> parse_kernel() {
    auto op = make_op(OpKind::KernelCall);
    expect_ident("air.kernel");
    parse_async_clauses(*op);
    op->symbol = expect_symbol();
    expect_ident("reads");
    op->reads = parse_view_list_paren();
    expect_ident("writes");
    op->writes = parse_view_list_paren();
    parse_attrs(*op);
    return op;
  }

  std::unique_ptr<Operation> parse_apply() {
    auto op = make_op(OpKind::AffineApply);
    expect_ident("affine.apply");
    if (lex_.tok().kind != Tok::AffineMapTok)
      lex_.fail("affine_map<...>");
    op->map = parse_affine_map(lex_.tok().text);
    lex_.next();
    expect_punct('(');
    if (!eat_punct(')')) {
      do {
        SrcLoc l = loc();
        Value v = lookup(expect_value_name(), l);
        if (v.type.kind != TypeKind::Index)
          fail_at(l, "TypeMismatch", "affine.apply operands must be index-typed");
        op->apply_dims.push_back(v);
      } while (eat_punct(','));
      expect_punct(')');
    }
    if (is_punct('[')) {
      expect_punct('[');
      if (!eat_punct(']')) {
        do {
          SrcLoc l = loc();
          Value v = lookup(expect_value_name(), l);
          if (v.type.kind != TypeKind::Index)
            fail_at(l, "TypeMismatch", "affine.apply operands must be index-typed");
          op->apply_syms.push_back(v);
        } while (eat_punct(','));
        expect_punct(']');
      }
    }
    if (static_cast<int>(op->apply_dims.size()) != op->map.num_dims ||
        static_cast<int>(op->apply_syms.size()) != op->map.num_syms ||
        op->map.results.size() != 1)
      fail_at(op->loc, "TypeMismatch", "affine.apply operand arity mismatch");
    return op;
  }

  std::unique_ptr<Operation> parse_const() {
    auto op = make_op(OpKind::ArithConst);
    expect_ident("arith.const");
    if (lex_.tok().kind != Tok::Int)
      lex_.fail("integer constant");
    op->const_value = lex_.tok().ival;
    lex_.next();
    expect_punct(':');
    op->const_type = parse_type();
    return op;
  }

  std::unique_ptr<Operation> parse_arith(bool is_add) {
    auto op = make_op(is_add ? OpKind::ArithAdd : OpKind::ArithMul);
    lex_.next();
    SrcLoc l = loc();
    op->operands.push_back(lookup(expect_value_name(), l));
    expect_punct(',');
    l = loc();
    op->operands.push_back(lookup(expect_value_name(), l));
    expect_punct(':');
    op->const_type = parse_type();
    for (const auto &o : op->operands)
      if (!(o.type == op->const_type))
        fail_at(l, "TypeMismatch", "arith operand type differs from result type");
    return op;
  }

  std::unique_ptr<Operation> parse_load() {
    auto op = make_op(OpKind::Load);
    expect_ident("memref.load");
    SrcLoc l = loc();
    op->buffer = lookup(expect_value_name(), l);
    if (op->buffer.type.kind != TypeKind::MemRef)
      fail_at(l, "TypeMismatch", "load base must be a memref");
    op->indices = parse_index_list_bracket();
    return op;
  }

  std::unique_ptr<Operation> parse_store() {
    auto op = make_op(OpKind::Store);
    expect_ident("memref.store");
    SrcLoc l = loc();
    op->operands.push_back(lookup(expect_value_name(), l));
    expect_punct(',');
    l = loc();
    op->buffer = lookup(expect_value_name(), l);
    if (op->buffer.type.kind != TypeKind::MemRef)
      fail_at(l, "TypeMismatch", "store base must be a memref");
    op->indices = parse_index_list_bracket();
    return op;
  }

  Lexer lex_;
  Program program_;
  std::vector<std::map<std::string, Value>> scopes_;
  std::vector<std::pair<std::string, Value>> pending_args_;
};

} // namespace

Program parse_program(const std::string &text, const std::string &filename) {
  Parser p(text, filename);
  return p.parse();
}

} // namespace air
