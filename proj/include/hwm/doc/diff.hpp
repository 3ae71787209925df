#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "hwm/doc/patch.hpp"
#include "hwm/doc/pointer.hpp"
#include "hwm/doc/value.hpp"

namespace hwm::doc {

enum class DiffKind { values_changed, item_added, item_removed, type_changed };

inline std::string_view diff_kind_name(DiffKind k) {
  switch (k) {
    case DiffKind::values_changed: return "values_changed";
    case DiffKind::item_added: return "item_added";
    case DiffKind::item_removed: return "item_removed";
    case DiffKind::type_changed: return "type_changed";
  }
  return "?";
}

struct DiffEntry {
  Pointer path;
  DiffKind kind;
  std::optional<Value> old_value;
  std::optional<Value> new_value;

  friend bool operator==(const DiffEntry&, const DiffEntry&) = default;
};

namespace detail {

inline void diff_into(const Pointer& at, const Value& a, const Value& b, std::vector<DiffEntry>& out) {
  if (a.is_object() && b.is_object()) {
    const auto& ao = a.as_object();
    const auto& bo = b.as_object();
    for (const auto& [k, av] : ao) {
      auto it = bo.find(k);
      if (it == bo.end()) out.push_back({at.child(k), DiffKind::item_removed, av, std::nullopt});
      else diff_into(at.child(k), av, it->second, out);
    }
    for (const auto& [k, bv] : bo)
      if (!ao.contains(k)) out.push_back({at.child(k), DiffKind::item_added, std::nullopt, bv});
    return;
  }
  // Sequences are leaves: compared wholesale, never descended.
  if (a == b) return;
  out.push_back({at, a.type() == b.type() ? DiffKind::values_changed : DiffKind::type_changed, a, b});
}

}  // namespace detail

// Structural difference from `before` to `after`, sorted by serialized path.
// Maps are descended key by key; anything else (including sequences and
// whole added/removed subtrees) is reported as a single entry.
inline std::vector<DiffEntry> deep_diff(const Value& before, const Value& after) {
  std::vector<DiffEntry> out;
  detail::diff_into(Pointer{}, before, after, out);
  std::stable_sort(out.begin(), out.end(), [](const DiffEntry& x, const DiffEntry& y) {
    return x.path.to_string() < y.path.to_string();
  });
  return out;
}

inline std::vector<PatchOp> diff_to_patch(const std::vector<DiffEntry>& diff) {
  std::vector<PatchOp> ops;
  ops.reserve(diff.size());
  for (const auto& d : diff) {
    switch (d.kind) {
      case DiffKind::values_changed:
      case DiffKind::type_changed: ops.push_back({PatchKind::replace, d.path, d.new_value}); break;
      case DiffKind::item_added: ops.push_back({PatchKind::add, d.path, d.new_value}); break;
      case DiffKind::item_removed: ops.push_back({PatchKind::remove, d.path, std::nullopt}); break;
    }
  }
  return ops;
}

inline Value to_value(const DiffEntry& d) {
  Value v = Value::object({{"path", Value(d.path.to_string())},
                           {"kind", Value(std::string(diff_kind_name(d.kind)))}});
  if (d.old_value) v["old_value"] = *d.old_value;
  if (d.new_value) v["new_value"] = *d.new_value;
  return v;
}

}  // namespace hwm::doc
