#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace hwm::doc {

class Value;
using Array = std::vector<Value>;
using Object = std::map<std::string, Value, std::less<>>;

enum class Type { null, boolean, number, text, array, object };

inline std::string_view type_name(Type t) {
  switch (t) {
    case Type::null: return "null";
    case Type::boolean: return "boolean";
    case Type::number: return "number";
    case Type::text: return "text";
    case Type::array: return "sequence";
    case Type::object: return "map";
  }
  return "?";
}

class TypeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Structured document value. Every number is a double; equality is deep and
// exact. Map keys are kept sorted so iteration and serialization are stable.
class Value {
 public:
  Value() = default;
  Value(std::nullptr_t) {}
  Value(bool b) : data_(b) {}
  Value(double d) : data_(d) {}
  template <std::integral T>
    requires(!std::same_as<T, bool>)
  Value(T i) : data_(static_cast<double>(i)) {}
  Value(const char* s) : data_(std::string(s)) {}
  Value(std::string s) : data_(std::move(s)) {}
  Value(std::string_view s) : data_(std::string(s)) {}
  Value(Array a) : data_(std::move(a)) {}
  Value(Object o) : data_(std::move(o)) {}

  static Value array(std::initializer_list<Value> items = {}) { return Value(Array(items)); }
  static Value object() { return Value(Object{}); }
  static Value object(std::initializer_list<std::pair<const std::string, Value>> kv) {
    return Value(Object(kv));
  }

  Type type() const { return static_cast<Type>(data_.index()); }
  bool is_null() const { return type() == Type::null; }
  bool is_bool() const { return type() == Type::boolean; }
  bool is_number() const { return type() == Type::number; }
  bool is_text() const { return type() == Type::text; }
  bool is_array() const { return type() == Type::array; }
  bool is_object() const { return type() == Type::object; }
  bool is_container() const { return is_array() || is_object(); }

  bool as_bool() const { return get<bool>(Type::boolean); }
  double as_number() const { return get<double>(Type::number); }
  const std::string& as_text() const { return get<std::string>(Type::text); }
  const Array& as_array() const { return get<Array>(Type::array); }
  Array& as_array() { return get<Array>(Type::array); }
  const Object& as_object() const { return get<Object>(Type::object); }
  Object& as_object() { return get<Object>(Type::object); }

  const Value* find(std::string_view key) const {
    if (!is_object()) return nullptr;
    const auto& o = as_object();
    auto it = o.find(key);
    return it == o.end() ? nullptr : &it->second;
  }
  Value* find(std::string_view key) {
    if (!is_object()) return nullptr;
    auto& o = as_object();
    auto it = o.find(key);
    return it == o.end() ? nullptr : &it->second;
  }
  // Map member access; throws if this is not a map or the key is absent.
  const Value& at(std::string_view key) const {
    const Value* v = find(key);
    if (!v) throw TypeError("missing key '" + std::string(key) + "'");
    return *v;
  }
  Value& operator[](std::string_view key) {
    if (is_null()) data_ = Object{};
    auto& o = as_object();
    auto it = o.find(key);
    if (it == o.end()) it = o.emplace(std::string(key), Value{}).first;
    return it->second;
  }
  double number_or(std::string_view key, double fallback) const {
    const Value* v = find(key);
    return v && v->is_number() ? v->as_number() : fallback;
  }

  friend bool operator==(const Value& a, const Value& b) { return a.data_ == b.data_; }

 private:
  template <typename T>
  const T& get(Type want) const {
    if (auto* p = std::get_if<T>(&data_)) return *p;
    throw TypeError("expected " + std::string(type_name(want)) + ", found " +
                    std::string(type_name(type())));
  }
  template <typename T>
  T& get(Type want) {
    if (auto* p = std::get_if<T>(&data_)) return *p;
    throw TypeError("expected " + std::string(type_name(want)) + ", found " +
                    std::string(type_name(type())));
  }

  std::variant<std::nullptr_t, bool, double, std::string, Array, Object> data_;
};

// Integer-valued doubles within the exactly-representable range serialize
// without a fractional part.
inline nlohmann::json to_json(const Value& v) {
  switch (v.type()) {
    case Type::null: return nullptr;
    case Type::boolean: return v.as_bool();
    case Type::number: {
      double d = v.as_number();
      if (!std::isfinite(d)) throw TypeError("non-finite number cannot be serialized");
      if (std::floor(d) == d && std::fabs(d) < 9007199254740992.0)
        return static_cast<std::int64_t>(d);
      return d;
    }
    case Type::text: return v.as_text();
    case Type::array: {
      auto out = nlohmann::json::array();
      for (const auto& e : v.as_array()) out.push_back(to_json(e));
      return out;
    }
    case Type::object: {
      auto out = nlohmann::json::object();
      for (const auto& [k, e] : v.as_object()) out[k] = to_json(e);
      return out;
    }
  }
  return nullptr;
}

inline Value from_json(const nlohmann::json& j) {
  using J = nlohmann::json::value_t;
  switch (j.type()) {
    case J::null: return Value{};
    case J::boolean: return Value(j.get<bool>());
    case J::number_integer: return Value(static_cast<double>(j.get<std::int64_t>()));
    case J::number_unsigned: return Value(static_cast<double>(j.get<std::uint64_t>()));
    case J::number_float: return Value(j.get<double>());
    case J::string: return Value(j.get<std::string>());
    case J::array: {
      Array a;
      a.reserve(j.size());
      for (const auto& e : j) a.push_back(from_json(e));
      return Value(std::move(a));
    }
    case J::object: {
      Object o;
      for (auto it = j.begin(); it != j.end(); ++it) o.emplace(it.key(), from_json(it.value()));
      return Value(std::move(o));
    }
    default: throw ParseError("unsupported JSON value");
  }
}

inline Value parse(std::string_view text) {
  try {
    return from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what());
  }
}

// Compact form when indent < 0.
inline std::string dump(const Value& v, int indent = -1) { return to_json(v).dump(indent); }

inline std::ostream& operator<<(std::ostream& os, const Value& v) { return os << dump(v); }

}  // namespace hwm::doc
