#pragma once

#include <string>
#include <string_view>

#include "empower/agents.hpp"

namespace empower {

/// Reads `key = value` lines (`#` starts a comment). Unknown keys, duplicates and
/// malformed values raise ParseError with the line number; missing keys keep their
/// defaults. The result is validated, so invalid values raise ConfigError.
TrainConfig parse_config_text(std::string_view text);
TrainConfig parse_config(const std::string& path);

/// Same parsing without the final validation, for callers that apply overrides first.
TrainConfig read_config_text(std::string_view text);
TrainConfig read_config(const std::string& path);

/// Every key with its current value, in a form parse_config_text reads back exactly.
std::string config_to_text(const TrainConfig& cfg);

}  // namespace empower
