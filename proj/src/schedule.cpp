#include "stagescope/schedule.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>

#include "stagescope/error.hpp"

namespace stagescope {

namespace {

void require_layers(int n_layers) {
  if (n_layers < 1) {
    throw ValidationError("schedule needs at least one layer, got " + std::to_string(n_layers));
  }
}

int parse_int(std::string_view s, std::string_view what) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError("schedule notation: invalid " + std::string(what) + " '" + std::string(s) + "'");
  }
  return v;
}

std::vector<int> iota_steps(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::identity: return "identity";
    case ScheduleKind::drop: return "drop";
    case ScheduleKind::swap: return "swap";
    case ScheduleKind::swap_drop_baseline: return "swap_drop_baseline";
    case ScheduleKind::repeat: return "repeat";
    case ScheduleKind::custom: return "custom";
  }
  return "unknown";
}

LayerSchedule::LayerSchedule(std::vector<int> steps, ScheduleKind kind, ScheduleParams params,
                             int n_layers)
    : steps_(std::move(steps)), kind_(kind), params_(params), n_layers_(n_layers) {
  validate(n_layers_);
}

LayerSchedule LayerSchedule::identity(int n_layers) {
  require_layers(n_layers);
  return {iota_steps(n_layers), ScheduleKind::identity, {}, n_layers};
}

LayerSchedule LayerSchedule::swap(int n_layers, int layer) {
  require_layers(n_layers);
  if (layer < 0 || layer > n_layers - 2) {
    throw ValidationError("swap layer " + std::to_string(layer) + " needs a successor; valid range is [0, " +
                          std::to_string(n_layers - 2) + "]");
  }
  auto steps = iota_steps(n_layers);
  std::swap(steps[layer], steps[layer + 1]);
  ScheduleParams p;
  p.layer = layer;
  return {std::move(steps), ScheduleKind::swap, p, n_layers};
}

LayerSchedule LayerSchedule::drop(int n_layers, int layer) {
  require_layers(n_layers);
  if (layer < 0 || layer >= n_layers) {
    throw ValidationError("drop layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(n_layers - 1) + "]");
  }
  auto steps = iota_steps(n_layers);
  steps.erase(steps.begin() + layer);
  ScheduleParams p;
  p.layer = layer;
  return {std::move(steps), ScheduleKind::drop, p, n_layers};
}

LayerSchedule LayerSchedule::swap_drop_baseline(int n_layers, int layer) {
  auto swapped = swap(n_layers, layer);
  auto steps = swapped.steps_;
  // After the swap, block `layer` sits at position layer+1.
  steps.erase(steps.begin() + layer + 1);
  ScheduleParams p;
  p.layer = layer;
  return {std::move(steps), ScheduleKind::swap_drop_baseline, p, n_layers};
}

LayerSchedule LayerSchedule::repeat(int n_layers, int start, int len, int times) {
  require_layers(n_layers);
  if (start < 0 || len < 0 || times < 0 || start + len > n_layers) {
    throw ValidationError("repeat block [" + std::to_string(start) + ", " + std::to_string(start + len) +
                          ") x" + std::to_string(times) + " does not fit in " + std::to_string(n_layers) +
                          " layers");
  }
  std::vector<int> steps;
  steps.reserve(static_cast<std::size_t>(n_layers + len * times));
  for (int l = 0; l < n_layers; ++l) {
    const int copies = (l >= start && l < start + len) ? times + 1 : 1;
    for (int c = 0; c < copies; ++c) steps.push_back(l);
  }
  ScheduleParams p;
  p.block_start = start;
  p.block_len = len;
  p.times = times;
  return {std::move(steps), ScheduleKind::repeat, p, n_layers};
}

LayerSchedule LayerSchedule::custom(int n_layers, std::vector<int> steps) {
  require_layers(n_layers);
  return {std::move(steps), ScheduleKind::custom, {}, n_layers};
}

LayerSchedule LayerSchedule::parse(std::string_view notation, int n_layers) {
  if (notation == "identity") return identity(n_layers);
  const auto colon = notation.find(':');
  if (colon == std::string_view::npos) {
    throw ValidationError("schedule notation '" + std::string(notation) +
                          "' is not one of identity, drop:N, swap:N, repeat:S+LxT, custom:a,b,...");
  }
  const auto head = notation.substr(0, colon);
  const auto body = notation.substr(colon + 1);
  if (head == "drop") return drop(n_layers, parse_int(body, "layer"));
  if (head == "swap") return swap(n_layers, parse_int(body, "layer"));
  if (head == "repeat") {
    const auto plus = body.find('+');
    const auto x = body.find('x');
    if (plus == std::string_view::npos || x == std::string_view::npos || x < plus) {
      throw ValidationError("repeat notation must be repeat:START+LENxTIMES, got '" + std::string(notation) + "'");
    }
    return repeat(n_layers, parse_int(body.substr(0, plus), "start"),
                  parse_int(body.substr(plus + 1, x - plus - 1), "length"),
                  parse_int(body.substr(x + 1), "times"));
  }
  if (head == "custom") {
    std::vector<int> steps;
    std::size_t pos = 0;
    while (pos < body.size()) {
      auto comma = body.find(',', pos);
      if (comma == std::string_view::npos) comma = body.size();
      steps.push_back(parse_int(body.substr(pos, comma - pos), "block index"));
      pos = comma + 1;
    }
    return custom(n_layers, std::move(steps));
  }
  throw ValidationError("unknown schedule kind '" + std::string(head) + "'");
}

std::string LayerSchedule::notation() const {
  switch (kind_) {
    case ScheduleKind::identity: return "identity";
    case ScheduleKind::drop: return "drop:" + std::to_string(*params_.layer);
    case ScheduleKind::swap: return "swap:" + std::to_string(*params_.layer);
    case ScheduleKind::repeat:
      return "repeat:" + std::to_string(*params_.block_start) + "+" + std::to_string(*params_.block_len) +
             "x" + std::to_string(*params_.times);
    case ScheduleKind::swap_drop_baseline:
    case ScheduleKind::custom: break;
  }
  std::string s = "custom:";
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(steps_[i]);
  }
  return s;
}

void LayerSchedule::validate(int n_layers) const {
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    if (steps_[i] < 0 || steps_[i] >= n_layers) {
      throw ValidationError("schedule step " + std::to_string(i) + " references block " +
                            std::to_string(steps_[i]) + " outside [0, " + std::to_string(n_layers) + ")");
    }
  }
}

std::size_t LayerSchedule::common_prefix(const LayerSchedule& other) const {
  const auto n = std::min(steps_.size(), other.steps_.size());
  std::size_t i = 0;
  while (i < n && steps_[i] == other.steps_[i]) ++i;
  return i;
}

}  // namespace stagescope
