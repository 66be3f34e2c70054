#include "mame/tap.hpp"

#include "mame/error.hpp"

namespace mame {

std::string_view to_string(Tap tap) {
  switch (tap) {
    case Tap::early:
      return "early";
    case Tap::mid:
      return "mid";
    case Tap::late:
      return "late";
  }
  return "?";
}

Tap parse_tap(std::string_view name) {
  if (name == "early") return Tap::early;
  if (name == "mid") return Tap::mid;
  if (name == "late") return Tap::late;
  throw ConfigError("unknown tap '" + std::string(name) + "' (expected early, mid or late)");
}

}  // namespace mame
