#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hwm/doc/pointer.hpp"
#include "hwm/doc/value.hpp"

namespace hwm::doc {

class PatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PatchKind { add, remove, replace };

inline std::string_view patch_kind_name(PatchKind k) {
  switch (k) {
    case PatchKind::add: return "add";
    case PatchKind::remove: return "remove";
    case PatchKind::replace: return "replace";
  }
  return "?";
}

inline std::optional<PatchKind> patch_kind_from(std::string_view s) {
  if (s == "add") return PatchKind::add;
  if (s == "remove") return PatchKind::remove;
  if (s == "replace") return PatchKind::replace;
  return std::nullopt;
}

struct PatchOp {
  PatchKind op;
  Pointer path;
  std::optional<Value> value;  // absent for remove

  friend bool operator==(const PatchOp&, const PatchOp&) = default;
};

inline Value to_value(const PatchOp& op) {
  Value v = Value::object({{"op", Value(std::string(patch_kind_name(op.op)))},
                           {"path", Value(op.path.to_string())}});
  if (op.value) v["value"] = *op.value;
  return v;
}

inline Value to_value(std::span<const PatchOp> ops) {
  Array a;
  for (const auto& op : ops) a.push_back(to_value(op));
  return Value(std::move(a));
}

// Only add/remove/replace are representable; move/copy/test are rejected.
inline PatchOp parse_patch_op(const Value& v) {
  if (!v.is_object()) throw PatchError("patch operation must be a map");
  const Value* op = v.find("op");
  const Value* path = v.find("path");
  if (!op || !op->is_text()) throw PatchError("patch operation needs a text 'op'");
  if (!path || !path->is_text()) throw PatchError("patch operation needs a text 'path'");
  auto kind = patch_kind_from(op->as_text());
  if (!kind) throw PatchError("unsupported patch op '" + op->as_text() + "'");
  PatchOp out{*kind, Pointer::parse(path->as_text()), std::nullopt};
  if (*kind != PatchKind::remove) {
    const Value* value = v.find("value");
    if (!value) throw PatchError(std::string(patch_kind_name(*kind)) + " requires 'value'");
    out.value = *value;
  }
  return out;
}

inline std::vector<PatchOp> parse_patch(const Value& v) {
  if (!v.is_array()) throw PatchError("patch document must be a sequence");
  std::vector<PatchOp> ops;
  for (const auto& e : v.as_array()) ops.push_back(parse_patch_op(e));
  return ops;
}

namespace detail {

inline Value& mutable_at(Value& doc, const Pointer& ptr, std::string_view what) {
  Value* cur = &doc;
  for (const auto& tok : ptr.tokens()) {
    if (cur->is_object()) {
      Value* next = cur->find(tok);
      if (!next) throw PatchError(std::string(what) + ": no key '" + tok + "' at " + ptr.to_string());
      cur = next;
    } else if (cur->is_array()) {
      auto idx = parse_index(tok);
      auto& arr = cur->as_array();
      if (!idx || *idx >= arr.size())
        throw PatchError(std::string(what) + ": bad index '" + tok + "' at " + ptr.to_string());
      cur = &arr[*idx];
    } else {
      throw PatchError(std::string(what) + ": cannot descend into scalar at " + ptr.to_string());
    }
  }
  return *cur;
}

inline void apply_one(Value& doc, const PatchOp& op) {
  if (op.path.is_root()) {
    if (op.op == PatchKind::remove) throw PatchError("cannot remove the document root");
    doc = *op.value;
    return;
  }
  Value& parent = mutable_at(doc, op.path.parent(), patch_kind_name(op.op));
  const std::string& last = op.path.back();
  if (parent.is_object()) {
    auto& obj = parent.as_object();
    auto it = obj.find(last);
    switch (op.op) {
      case PatchKind::add:
        if (it == obj.end()) obj.emplace(last, *op.value);
        else it->second = *op.value;
        return;
      case PatchKind::replace:
        if (it == obj.end()) throw PatchError("replace: no key at " + op.path.to_string());
        it->second = *op.value;
        return;
      case PatchKind::remove:
        if (it == obj.end()) throw PatchError("remove: no key at " + op.path.to_string());
        obj.erase(it);
        return;
    }
  } else if (parent.is_array()) {
    auto& arr = parent.as_array();
    auto idx = parse_index(last);
    if (!idx) throw PatchError("sequence index required at " + op.path.to_string());
    switch (op.op) {
      case PatchKind::add:
        if (*idx > arr.size()) throw PatchError("add: index beyond length at " + op.path.to_string());
        if (*idx == arr.size()) arr.push_back(*op.value);
        else arr[*idx] = *op.value;  // existing path behaves as replace
        return;
      case PatchKind::replace:
        if (*idx >= arr.size()) throw PatchError("replace: index out of range at " + op.path.to_string());
        arr[*idx] = *op.value;
        return;
      case PatchKind::remove:
        if (*idx >= arr.size()) throw PatchError("remove: index out of range at " + op.path.to_string());
        arr.erase(arr.begin() + static_cast<std::ptrdiff_t>(*idx));
        return;
    }
  }
  throw PatchError("cannot address into scalar at " + op.path.to_string());
}

}  // namespace detail

// Applies ops in order to a copy of doc. Either every op succeeds or the
// call throws PatchError and the caller's document is untouched.
inline Value apply_patch(Value doc, std::span<const PatchOp> ops) {
  for (const auto& op : ops) detail::apply_one(doc, op);
  return doc;
}

}  // namespace hwm::doc
