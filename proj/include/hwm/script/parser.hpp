#pragma once

#include <cctype>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hwm/script/ast.hpp"

namespace hwm::script {

class ScriptError : public std::runtime_error {
 public:
  enum class Kind { syntax, unbound, arity, dialect };

  ScriptError(Kind kind, SourcePos pos, const std::string& msg)
      : std::runtime_error(std::to_string(pos.line) + ":" + std::to_string(pos.column) + ": " + msg),
        kind_(kind),
        pos_(pos) {}

  Kind kind() const { return kind_; }
  SourcePos pos() const { return pos_; }

 private:
  Kind kind_;
  SourcePos pos_;
};

namespace detail {

enum class Tok { number, text, ident, punct, end };

struct Token {
  Tok type;
  std::string text;
  double number = 0;
  SourcePos pos;
};

inline std::vector<Token> lex(std::string_view src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  std::size_t i = 0;
  auto advance = [&](std::size_t n = 1) {
    for (std::size_t k = 0; k < n && i < src.size(); ++k, ++i) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
  };
  while (i < src.size()) {
    char c = src[i];
    if (c == '#') {
      while (i < src.size() && src[i] != '\n') advance();
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance();
      continue;
    }
    SourcePos pos{line, col};
    if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t j = i;
      while (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
      if (j + 1 < src.size() && src[j] == '.' && std::isdigit(static_cast<unsigned char>(src[j + 1]))) {
        ++j;
        while (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
      }
      if (j < src.size() && (src[j] == 'e' || src[j] == 'E')) {
        std::size_t k = j + 1;
        if (k < src.size() && (src[k] == '+' || src[k] == '-')) ++k;
        if (k < src.size() && std::isdigit(static_cast<unsigned char>(src[k]))) {
          while (k < src.size() && std::isdigit(static_cast<unsigned char>(src[k]))) ++k;
          j = k;
        }
      }
      std::string lit(src.substr(i, j - i));
      out.push_back({Tok::number, lit, std::stod(lit), pos});
      advance(j - i);
      continue;
    }
    if (c == '"') {
      std::string s;
      advance();
      bool closed = false;
      while (i < src.size()) {
        char d = src[i];
        if (d == '"') {
          advance();
          closed = true;
          break;
        }
        if (d == '\n') break;
        if (d == '\\' && i + 1 < src.size()) {
          char e = src[i + 1];
          switch (e) {
            case 'n': s.push_back('\n'); break;
            case 't': s.push_back('\t'); break;
            case '"': s.push_back('"'); break;
            case '\\': s.push_back('\\'); break;
            default: throw ScriptError(ScriptError::Kind::syntax, {line, col}, "unknown escape");
          }
          advance(2);
          continue;
        }
        s.push_back(d);
        advance();
      }
      if (!closed) throw ScriptError(ScriptError::Kind::syntax, pos, "unterminated text literal");
      out.push_back({Tok::text, std::move(s), 0, pos});
      continue;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < src.size() && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
      out.push_back({Tok::ident, std::string(src.substr(i, j - i)), 0, pos});
      advance(j - i);
      continue;
    }
    static constexpr std::string_view two[] = {"==", "!=", "<=", ">="};
    bool matched = false;
    for (auto op : two) {
      if (src.substr(i, 2) == op) {
        out.push_back({Tok::punct, std::string(op), 0, pos});
        advance(2);
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (std::string_view("()[]{},:.+-*/<>=").find(c) != std::string_view::npos) {
      out.push_back({Tok::punct, std::string(1, c), 0, pos});
      advance();
      continue;
    }
    throw ScriptError(ScriptError::Kind::syntax, pos, std::string("unexpected character '") + c + "'");
  }
  out.push_back({Tok::end, "", 0, {line, col}});
  return out;
}

inline const std::set<std::string, std::less<>>& reserved_words() {
  static const std::set<std::string, std::less<>> words = {
      "let", "emit", "return", "if", "then", "else", "and", "or", "not", "true",
      "false", "null", "get", "aget", "default", "in", "sum", "count", "filter"};
  return words;
}

inline std::optional<Builtin> builtin_from(std::string_view name) {
  if (name == "min") return Builtin::min;
  if (name == "max") return Builtin::max;
  if (name == "abs") return Builtin::abs;
  if (name == "floor") return Builtin::floor;
  if (name == "round") return Builtin::round;
  if (name == "clamp") return Builtin::clamp;
  if (name == "len") return Builtin::len;
  return std::nullopt;
}

inline std::size_t builtin_arity(Builtin b) {
  switch (b) {
    case Builtin::min:
    case Builtin::max: return 2;
    case Builtin::clamp: return 3;
    default: return 1;
  }
}

class Parser {
 public:
  Parser(std::string_view src, FunctionKind kind) : toks_(lex(src)), kind_(kind) {}

  Body parse_body() {
    Body body;
    body.kind = kind_;
    scopes_.emplace_back();
    while (!at_end()) body.statements.push_back(statement());
    scopes_.pop_back();
    if (kind_ == FunctionKind::precondition && !saw_return_)
      throw ScriptError(ScriptError::Kind::dialect, {1, 1}, "precondition body has no return");
    return body;
  }

 private:
  // --- token helpers -------------------------------------------------------
  const Token& peek(std::size_t ahead = 0) const {
    return toks_[std::min(pos_ + ahead, toks_.size() - 1)];
  }
  bool at_end() const { return peek().type == Tok::end; }
  const Token& next() {
    const Token& t = peek();
    if (pos_ < toks_.size() - 1) ++pos_;
    return t;
  }
  bool is_punct(std::string_view p, std::size_t ahead = 0) const {
    return peek(ahead).type == Tok::punct && peek(ahead).text == p;
  }
  bool is_word(std::string_view w, std::size_t ahead = 0) const {
    return peek(ahead).type == Tok::ident && peek(ahead).text == w;
  }
  [[noreturn]] void fail(const std::string& msg) const {
    const Token& t = peek();
    std::string found = t.type == Tok::end ? "end of input" : "'" + t.text + "'";
    throw ScriptError(ScriptError::Kind::syntax, t.pos, msg + ", found " + found);
  }
  void expect_punct(std::string_view p) {
    if (!is_punct(p)) fail("expected '" + std::string(p) + "'");
    next();
  }
  void expect_word(std::string_view w) {
    if (!is_word(w)) fail("expected '" + std::string(w) + "'");
    next();
  }
  std::string identifier(std::string_view what) {
    if (peek().type != Tok::ident || reserved_words().contains(peek().text)) fail("expected " + std::string(what));
    if (builtin_from(peek().text))
      throw ScriptError(ScriptError::Kind::syntax, peek().pos, "'" + peek().text + "' is a builtin name");
    return next().text;
  }

  // --- scopes ------------------------------------------------------------------
  void bind(const std::string& name) { scopes_.back().insert(name); }
  bool bound(const std::string& name) const {
    for (auto it = scopes_.rbegin(); it != scopes_.rend(); ++it)
      if (it->contains(name)) return true;
    return false;
  }

  // --- statements ---------------------------------------------------------------
  Stmt statement() {
    SourcePos pos = peek().pos;
    if (is_word("let")) {
      next();
      std::string name = identifier("identifier after 'let'");
      expect_punct("=");
      ExprPtr value = expr();
      bind(name);
      return {Let{std::move(name), std::move(value)}, pos};
    }
    if (is_word("emit")) {
      if (kind_ == FunctionKind::precondition)
        throw ScriptError(ScriptError::Kind::dialect, pos, "precondition bodies cannot emit patches");
      next();
      if (peek().type != Tok::ident) fail("expected add, remove or replace after 'emit'");
      auto op = doc::patch_kind_from(peek().text);
      if (!op) fail("expected add, remove or replace after 'emit'");
      next();
      Emit e{*op, nullptr, nullptr, std::nullopt};
      if (at_end() || is_punct("}")) fail("expected pointer");
      e.pointer = primary();
      e.literal = literal_pointer(*e.pointer);
      if (e.literal && e.literal->is_root())
        throw ScriptError(ScriptError::Kind::syntax, e.pointer->pos, "patches may not address the root");
      if (*op != doc::PatchKind::remove) {
        if (at_end() || is_punct("}")) fail("expected value expression");
        e.value = expr();
      }
      return {std::move(e), pos};
    }
    if (is_word("return")) {
      if (kind_ != FunctionKind::precondition)
        throw ScriptError(ScriptError::Kind::dialect, pos, "only precondition bodies return a verdict");
      next();
      expect_punct("(");
      ExprPtr ok = expr();
      expect_punct(",");
      ExprPtr fb = expr();
      expect_punct(")");
      saw_return_ = true;
      return {Return{std::move(ok), std::move(fb)}, pos};
    }
    if (is_word("if")) return if_statement();
    fail("expected statement (let, emit, return, if)");
  }

  Stmt if_statement() {
    SourcePos pos = peek().pos;
    expect_word("if");
    If s;
    s.cond = expr();
    s.then_block = block();
    if (is_word("else")) {
      next();
      if (is_word("if")) s.else_block.push_back(if_statement());
      else s.else_block = block();
    }
    return {std::move(s), pos};
  }

  Block block() {
    expect_punct("{");
    scopes_.emplace_back();
    Block b;
    while (!is_punct("}")) {
      if (at_end()) fail("expected '}'");
      b.push_back(statement());
    }
    next();
    scopes_.pop_back();
    return b;
  }

  // --- expressions -------------------------------------------------------------
  ExprPtr make(SourcePos pos, auto node) {
    auto e = std::make_unique<Expr>();
    e->node = std::move(node);
    e->pos = pos;
    return e;
  }

  ExprPtr expr() {
    if (is_word("if")) {
      SourcePos pos = next().pos;
      ExprPtr c = expr();
      expect_word("then");
      ExprPtr t = expr();
      expect_word("else");
      ExprPtr f = expr();
      return make(pos, Conditional{std::move(c), std::move(t), std::move(f)});
    }
    return or_expr();
  }

  ExprPtr or_expr() {
    ExprPtr lhs = and_expr();
    while (is_word("or")) {
      SourcePos pos = next().pos;
      lhs = make(pos, Binary{BinaryOp::logical_or, std::move(lhs), and_expr()});
    }
    return lhs;
  }

  ExprPtr and_expr() {
    ExprPtr lhs = not_expr();
    while (is_word("and")) {
      SourcePos pos = next().pos;
      lhs = make(pos, Binary{BinaryOp::logical_and, std::move(lhs), not_expr()});
    }
    return lhs;
  }

  ExprPtr not_expr() {
    if (is_word("not")) {
      SourcePos pos = next().pos;
      return make(pos, Unary{UnaryOp::logical_not, not_expr()});
    }
    return cmp_expr();
  }

  ExprPtr cmp_expr() {
    ExprPtr lhs = add_expr();
    static constexpr std::pair<std::string_view, BinaryOp> ops[] = {
        {"==", BinaryOp::eq}, {"!=", BinaryOp::ne}, {"<=", BinaryOp::le},
        {">=", BinaryOp::ge}, {"<", BinaryOp::lt},  {">", BinaryOp::gt}};
    for (auto [text, op] : ops) {
      if (is_punct(text)) {
        SourcePos pos = next().pos;
        return make(pos, Binary{op, std::move(lhs), add_expr()});
      }
    }
    return lhs;
  }

  ExprPtr add_expr() {
    ExprPtr lhs = mul_expr();
    while (is_punct("+") || is_punct("-")) {
      BinaryOp op = peek().text == "+" ? BinaryOp::add : BinaryOp::sub;
      SourcePos pos = next().pos;
      lhs = make(pos, Binary{op, std::move(lhs), mul_expr()});
    }
    return lhs;
  }

  ExprPtr mul_expr() {
    ExprPtr lhs = unary();
    while (is_punct("*") || is_punct("/")) {
      BinaryOp op = peek().text == "*" ? BinaryOp::mul : BinaryOp::div;
      SourcePos pos = next().pos;
      lhs = make(pos, Binary{op, std::move(lhs), unary()});
    }
    return lhs;
  }

  ExprPtr unary() {
    if (is_punct("-")) {
      SourcePos pos = next().pos;
      return make(pos, Unary{UnaryOp::negate, unary()});
    }
    return postfix();
  }

  ExprPtr postfix() {
    ExprPtr e = primary();
    for (;;) {
      if (is_punct(".")) {
        SourcePos pos = next().pos;
        if (peek().type != Tok::ident) fail("expected field name after '.'");
        e = make(pos, Member{std::move(e), next().text});
      } else if (is_punct("[")) {
        SourcePos pos = next().pos;
        ExprPtr idx = expr();
        expect_punct("]");
        e = make(pos, Index{std::move(e), std::move(idx)});
      } else {
        return e;
      }
    }
  }

  ExprPtr primary() {
    const Token& t = peek();
    SourcePos pos = t.pos;
    switch (t.type) {
      case Tok::number: {
        double v = next().number;
        return make(pos, Literal{doc::Value(v)});
      }
      case Tok::text: {
        std::string s = next().text;
        return make(pos, Literal{doc::Value(std::move(s))});
      }
      case Tok::end: fail("expected expression");
      case Tok::punct: {
        if (is_punct("(")) {
          next();
          ExprPtr e = expr();
          expect_punct(")");
          return e;
        }
        if (is_punct("[")) {
          next();
          SequenceLiteral seq;
          if (!is_punct("]")) {
            seq.items.push_back(expr());
            while (is_punct(",")) {
              next();
              seq.items.push_back(expr());
            }
          }
          expect_punct("]");
          return make(pos, std::move(seq));
        }
        if (is_punct("{")) {
          next();
          MapLiteral map;
          if (!is_punct("}")) {
            for (;;) {
              if (peek().type != Tok::text) fail("expected text key in map literal");
              std::string key = next().text;
              expect_punct(":");
              map.items.emplace_back(std::move(key), expr());
              if (!is_punct(",")) break;
              next();
            }
          }
          expect_punct("}");
          return make(pos, std::move(map));
        }
        fail("expected expression");
      }
      case Tok::ident: break;
    }
    const std::string& w = t.text;
    if (w == "true" || w == "false") {
      next();
      return make(pos, Literal{doc::Value(w == "true")});
    }
    if (w == "null") {
      next();
      return make(pos, Literal{doc::Value()});
    }
    if (w == "get" || w == "aget") {
      bool from_action = w == "aget";
      if (from_action && kind_ == FunctionKind::dynamic)
        throw ScriptError(ScriptError::Kind::dialect, pos, "dynamic functions have no action to read");
      next();
      Get g{from_action, primary(), nullptr, std::nullopt};
      g.literal = literal_pointer(*g.pointer);
      if (is_word("default")) {
        next();
        g.fallback = unary();
      }
      return make(pos, std::move(g));
    }
    if (w == "sum" || w == "count" || w == "filter") {
      AggregateKind kind = w == "sum" ? AggregateKind::sum : w == "count" ? AggregateKind::count : AggregateKind::filter;
      next();
      expect_punct("(");
      std::string var = identifier("element variable");
      expect_word("in");
      ExprPtr source = expr();
      expect_punct(":");
      scopes_.emplace_back();
      bind(var);
      ExprPtr body = expr();
      scopes_.pop_back();
      expect_punct(")");
      return make(pos, Aggregate{kind, std::move(var), std::move(source), std::move(body)});
    }
    if (auto fn = builtin_from(w)) {
      next();
      expect_punct("(");
      Call call{*fn, {}};
      if (!is_punct(")")) {
        call.args.push_back(expr());
        while (is_punct(",")) {
          next();
          call.args.push_back(expr());
        }
      }
      expect_punct(")");
      if (call.args.size() != builtin_arity(*fn))
        throw ScriptError(ScriptError::Kind::arity, pos,
                          "'" + w + "' takes " + std::to_string(builtin_arity(*fn)) + " argument(s), got " +
                              std::to_string(call.args.size()));
      return make(pos, std::move(call));
    }
    if (reserved_words().contains(w)) fail("unexpected keyword");
    std::string name = next().text;
    if (!bound(name)) throw ScriptError(ScriptError::Kind::unbound, pos, "unbound identifier '" + name + "'");
    return make(pos, VarRef{std::move(name)});
  }

  static std::optional<doc::Pointer> literal_pointer(const Expr& e) {
    const auto* lit = std::get_if<Literal>(&e.node);
    if (!lit) return std::nullopt;
    if (!lit->value.is_text())
      throw ScriptError(ScriptError::Kind::syntax, e.pos, "pointer must be text");
    try {
      return doc::Pointer::parse(lit->value.as_text());
    } catch (const doc::PointerSyntaxError& err) {
      throw ScriptError(ScriptError::Kind::syntax, e.pos, err.what());
    }
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
  FunctionKind kind_;
  std::vector<std::set<std::string>> scopes_;
  bool saw_return_ = false;
};

}  // namespace detail

// Parses and statically checks a function body for the given kind.
inline std::shared_ptr<const Body> compile(std::string_view source, FunctionKind kind) {
  detail::Parser p(source, kind);
  return std::make_shared<const Body>(p.parse_body());
}

}  // namespace hwm::script
