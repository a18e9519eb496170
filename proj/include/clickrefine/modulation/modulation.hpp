#pragma once

#include <vector>

#include "clickrefine/core/array.hpp"
#include "clickrefine/interaction/click.hpp"

namespace clickrefine {

struct ModulationParams {
  double r_max = 100.0;
  double r_min = 5.0;
  double p_clamp_low = 0.01;
  double p_clamp_high = 0.99;
  // false selects the unfiltered fixed-radius circle used as the comparison baseline.
  bool filtered = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModulationParams& p);
void from_json(const nlohmann::json& j, ModulationParams& p);

struct WindowMember {
  int y = 0;
  int x = 0;
  double distance = 0.0;
};

struct ModulationWindow {
  Click center;
  double radius = 0.0;
  double p_center = 0.0;  // raw probability at the click
  double mean = 0.0;
  double median = 0.0;    // lower median
  double min = 0.0;
  double max = 0.0;
  double threshold = 0.0; // retention bound actually applied
  std::vector<WindowMember> members;  // retained pixels, row-major
  std::size_t circle_size = 0;        // pixels in the circle before filtering
};

// Half the distance to the nearest opposite-kind click, r_max without one,
// floored at r_min.
double modulation_radius(const Click& u, const std::vector<Click>& all_clicks, const ModulationParams& params);

// Circle of the given radius around u, filtered by the click-kind threshold
// when `filtered` is set.
template <typename T>
ModulationWindow filter_window(const BasicArray<T>& prob, const Click& u, double radius, bool filtered = true);

// Distance-attenuated gamma adjustment of the retained window; every other
// pixel is copied unchanged.
template <typename T>
BasicArray<T> modulate(const BasicArray<T>& prob, const Click& u, const std::vector<Click>& all_clicks,
                       const ModulationParams& params = {});

template <typename T>
void validate_prob_map(const BasicArray<T>& prob);

}  // namespace clickrefine
