#pragma once

// Layer execution orders. Block indices are 0-based.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace stagescope {

enum class ScheduleKind { identity, drop, swap, swap_drop_baseline, repeat, custom };

std::string_view to_string(ScheduleKind kind);

struct ScheduleParams {
  std::optional<int> layer;
  std::optional<int> block_start;
  std::optional<int> block_len;
  std::optional<int> times;

  friend bool operator==(const ScheduleParams&, const ScheduleParams&) = default;
};

class LayerSchedule {
 public:
  // [0, 1, ..., L-1]
  static LayerSchedule identity(int n_layers);
  // identity with positions l and l+1 transposed; 0 <= l <= L-2.
  static LayerSchedule swap(int n_layers, int layer);
  // identity with block l removed.
  static LayerSchedule drop(int n_layers, int layer);
  // swap(l) with the block moved later (l) removed; equals drop(l) by
  // construction and exists to make that baseline explicit in reports.
  static LayerSchedule swap_drop_baseline(int n_layers, int layer);
  // Every block in [start, start+len) runs times+1 consecutive times.
  static LayerSchedule repeat(int n_layers, int start, int len, int times);
  static LayerSchedule custom(int n_layers, std::vector<int> steps);

  // "identity", "drop:3", "swap:3", "repeat:5+5x1", "custom:0,1,3,2,4".
  static LayerSchedule parse(std::string_view notation, int n_layers);
  std::string notation() const;

  const std::vector<int>& steps() const { return steps_; }
  std::size_t size() const { return steps_.size(); }
  ScheduleKind kind() const { return kind_; }
  const ScheduleParams& params() const { return params_; }
  int n_layers() const { return n_layers_; }

  // Throws ValidationError if any step is outside [0, n_layers).
  void validate(int n_layers) const;

  // Index of the first step that differs from `other` (the shared prefix
  // length).
  std::size_t common_prefix(const LayerSchedule& other) const;

  friend bool operator==(const LayerSchedule&, const LayerSchedule&) = default;

 private:
  LayerSchedule(std::vector<int> steps, ScheduleKind kind, ScheduleParams params, int n_layers);

  std::vector<int> steps_;
  ScheduleKind kind_ = ScheduleKind::identity;
  ScheduleParams params_;
  int n_layers_ = 0;
};

}  // namespace stagescope
