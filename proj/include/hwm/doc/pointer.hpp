#pragma once

#include <compare>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hwm/doc/value.hpp"

namespace hwm::doc {

class PointerSyntaxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Slash-separated address into a document. "~1" encodes '/', "~0" encodes '~'.
class Pointer {
 public:
  Pointer() = default;
  explicit Pointer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {}

  static Pointer parse(std::string_view text) {
    if (text.empty()) return Pointer{};
    if (text.front() != '/')
      throw PointerSyntaxError("pointer must start with '/': \"" + std::string(text) + "\"");
    std::vector<std::string> tokens;
    std::string cur;
    for (std::size_t i = 1; i <= text.size(); ++i) {
      if (i == text.size() || text[i] == '/') {
        tokens.push_back(std::move(cur));
        cur.clear();
        continue;
      }
      char c = text[i];
      if (c == '~') {
        if (i + 1 >= text.size() || (text[i + 1] != '0' && text[i + 1] != '1'))
          throw PointerSyntaxError("bad escape in pointer \"" + std::string(text) + "\"");
        cur.push_back(text[i + 1] == '0' ? '~' : '/');
        ++i;
      } else {
        cur.push_back(c);
      }
    }
    return Pointer(std::move(tokens));
  }

  std::string to_string() const {
    std::string out;
    for (const auto& t : tokens_) {
      out.push_back('/');
      for (char c : t) {
        if (c == '~') out += "~0";
        else if (c == '/') out += "~1";
        else out.push_back(c);
      }
    }
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_root() const { return tokens_.empty(); }
  std::size_t size() const { return tokens_.size(); }
  const std::string& back() const { return tokens_.back(); }
  Pointer parent() const {
    if (tokens_.empty()) return {};
    return Pointer(std::vector<std::string>(tokens_.begin(), tokens_.end() - 1));
  }
  Pointer child(std::string token) const {
    auto t = tokens_;
    t.push_back(std::move(token));
    return Pointer(std::move(t));
  }

  friend bool operator==(const Pointer&, const Pointer&) = default;
  friend auto operator<=>(const Pointer&, const Pointer&) = default;

 private:
  std::vector<std::string> tokens_;
};

// Array index tokens are "0" or a decimal without leading zeros.
inline std::optional<std::size_t> parse_index(std::string_view token) {
  if (token.empty() || token.size() > 18) return std::nullopt;
  if (token.size() > 1 && token.front() == '0') return std::nullopt;
  std::size_t n = 0;
  for (char c : token) {
    if (c < '0' || c > '9') return std::nullopt;
    n = n * 10 + static_cast<std::size_t>(c - '0');
  }
  return n;
}

enum class MissKind { absent_key, index_out_of_range, bad_index, not_a_container };

inline std::string_view miss_kind_name(MissKind k) {
  switch (k) {
    case MissKind::absent_key: return "absent_key";
    case MissKind::index_out_of_range: return "index_out_of_range";
    case MissKind::bad_index: return "bad_index";
    case MissKind::not_a_container: return "not_a_container";
  }
  return "?";
}

struct Miss {
  MissKind kind;
  std::size_t depth;  // index of the token that could not be followed
};

struct Resolved {
  const Value* value = nullptr;
  std::optional<Miss> miss;
  explicit operator bool() const { return value != nullptr; }
};

inline Resolved resolve(const Value& doc, const Pointer& ptr) {
  const Value* cur = &doc;
  const auto& toks = ptr.tokens();
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (cur->is_object()) {
      const Value* next = cur->find(toks[i]);
      if (!next) return {nullptr, Miss{MissKind::absent_key, i}};
      cur = next;
    } else if (cur->is_array()) {
      auto idx = parse_index(toks[i]);
      if (!idx) return {nullptr, Miss{MissKind::bad_index, i}};
      const auto& arr = cur->as_array();
      if (*idx >= arr.size()) return {nullptr, Miss{MissKind::index_out_of_range, i}};
      cur = &arr[*idx];
    } else {
      return {nullptr, Miss{MissKind::not_a_container, i}};
    }
  }
  return {cur, std::nullopt};
}

inline Resolved resolve(const Value& doc, std::string_view ptr) {
  return resolve(doc, Pointer::parse(ptr));
}

}  // namespace hwm::doc
