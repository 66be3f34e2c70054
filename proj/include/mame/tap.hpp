#pragma once

#include <array>
#include <set>
#include <string>
#include <string_view>

namespace mame {

/// The three feature taps of the backbone: low, intermediate and high level.
enum class Tap { early = 0, mid = 1, late = 2 };

inline constexpr std::array<Tap, 3> kAllTaps{Tap::early, Tap::mid, Tap::late};

using TapSet = std::set<Tap>;

std::string_view to_string(Tap tap);
/// Throws ConfigError on unknown names.
Tap parse_tap(std::string_view name);

inline int tap_index(Tap tap) { return static_cast<int>(tap); }

}  // namespace mame
