#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bootleg/probe.hpp"
#include "bootleg/train.hpp"

namespace bootleg {

/// Everything one CLI invocation can be configured with.
struct RunConfig {
  TrainConfig train;
  ProbeSpec probe;

  std::string mask_preset = "bootleg";  // bootleg | ijepa
  std::string taps = "default";         // "default" or a tap list

  // "synthetic" or an image-folder root.
  std::string train_data = "synthetic";
  std::string test_data = "synthetic";
  std::size_t synthetic_train = 2560;
  std::size_t synthetic_test = 1000;
  int synthetic_classes = 10;

  std::size_t checkpoint_every = 0;
  std::size_t stats_batches = 160;
  std::size_t dump_images = 256;

  /// Resolves taps, fills derived fields and checks the train config.
  void finalize();
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

/// Documented keys in application order.
const std::vector<ConfigKey>& config_keys();

/// `key = value` lines, `#` starts a comment. Unknown keys raise UnknownKey.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

/// Applies assignments (later ones win) onto defaults, then finalizes.
RunConfig build_config(const std::vector<std::pair<std::string, std::string>>& assignments);

/// Reads a file (empty path: defaults only) and applies `key=value` overrides.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

/// Every key with its resolved value; parses back to the same config.
std::string resolved_config_text(const RunConfig& cfg);

std::string version_stamp();

}  // namespace bootleg
