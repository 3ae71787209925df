#pragma once

namespace hwm::fixtures {

struct PersCase {
  bool truth, old_pred, new_pred;
  int want;
};

// (truth, old, new) -> [new right] - [old right], enumerated by hand.
inline constexpr PersCase kPers[] = {
    {true, false, true, 1},   {true, true, true, 0},    {true, true, false, -1}, {true, false, false, 0},
    {false, true, false, 1},  {false, false, false, 0}, {false, false, true, -1}, {false, true, true, 0},
};

struct OdrsCase {
  const char* name;
  const char* prev;
  const char* truth;
  const char* pred;
  double want;
};

// Each expected value is traced by hand from the entry rules.
inline constexpr OdrsCase kOdrs[] = {
    {"closer", R"({"a":10})", R"({"a":14})", R"({"a":13})", 1.0},
    {"overshoot", R"({"a":10})", R"({"a":14})", R"({"a":5})", -1.0},
    {"empty_diff", R"({"a":1})", R"({"a":1})", R"({"a":99})", 0.0},
    {"exact", R"({"a":10})", R"({"a":14})", R"({"a":14})", 1.0},
    {"unchanged_ties_prev", R"({"a":10})", R"({"a":14})", R"({"a":10})", 1.0},
    {"mirror_tie", R"({"a":10})", R"({"a":14})", R"({"a":18})", 1.0},
    {"just_past_mirror", R"({"a":10})", R"({"a":14})", R"({"a":18.5})", -1.0},
    {"two_of_three", R"({"a":0,"b":0,"c":0})", R"({"a":1,"b":2,"c":3})", R"({"a":1,"b":2,"c":-9})", 1.0 / 3.0},
    {"text_match", R"({"s":"open"})", R"({"s":"closed"})", R"({"s":"closed"})", 1.0},
    {"text_miss", R"({"s":"open"})", R"({"s":"closed"})", R"({"s":"open"})", -1.0},
    {"bool_match", R"({"f":false})", R"({"f":true})", R"({"f":true})", 1.0},
    {"list_leaf_match", R"({"l":[1,2]})", R"({"l":[1,3]})", R"({"l":[1,3]})", 1.0},
    {"list_leaf_near_is_not_numeric", R"({"l":[1,2]})", R"({"l":[1,3]})", R"({"l":[1,2.9]})", -1.0},
    {"item_added_always_minus", R"({"a":1})", R"({"a":1,"b":2})", R"({"a":1,"b":2})", -1.0},
    {"item_removed_always_minus", R"({"a":1,"b":2})", R"({"a":1})", R"({"a":1})", -1.0},
    {"type_changed_always_minus", R"({"a":1})", R"({"a":"1"})", R"({"a":"1"})", -1.0},
    {"mixed_kinds", R"({"a":1,"b":5})", R"({"a":2,"c":0})", R"({"a":2,"c":0})", -1.0 / 3.0},
    {"pred_missing_path", R"({"a":1})", R"({"a":2})", R"({})", -1.0},
    {"pred_wrong_type", R"({"a":1})", R"({"a":2})", R"({"a":"2"})", -1.0},
    {"nested_map", R"({"m":{"x":1,"y":1}})", R"({"m":{"x":2,"y":1}})", R"({"m":{"x":1.5,"y":7}})", 1.0},
    {"spurious_change_ignored", R"({"a":1,"b":1})", R"({"a":2,"b":1})", R"({"a":2,"b":50})", 1.0},
    {"four_entries_split", R"({"a":0,"b":0,"c":0,"d":0})", R"({"a":1,"b":1,"c":1,"d":1})",
     R"({"a":1,"b":1,"c":5,"d":-5})", 0.0},
};

}  // namespace hwm::fixtures
