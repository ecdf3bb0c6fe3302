#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssp/harness/config.hpp"

namespace ssp::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2 };

using FlagList = std::vector<std::pair<std::string, std::string>>;

/// Desk profile (or the published defaults with `paper_scale`), then the
/// config file text, then flags. Flag keys may use any spelling accepted by
/// canonical_key. Throws harness::ConfigError naming the key.
harness::ExperimentConfig resolve_config(bool paper_scale, std::string_view file_text, const FlagList& flags);

/// `child_num_layers` -> `child.num-layers`; keys without a group prefix
/// become dashed (`batch-size`).
std::string dotted_key(std::string_view key);

/// Entry point behind the `ssp` binary. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Keeps large tensor buffers out of mmap and stops glibc from trimming the
/// heap after every step. No-op on other C libraries.
void tune_allocator();

struct FetchResult {
    std::vector<std::filesystem::path> files;
};

/// Downloads `url` (http, or https when built with OpenSSL) into `dest`.
/// A gzip body is inflated; a tar archive has its regular `.bin` members
/// written flat into `dest`; anything else is saved under the URL's last
/// path component. Throws std::runtime_error on network or HTTP failure.
FetchResult fetch_data(const std::string& url, const std::filesystem::path& dest);

/// Regular-file members of a ustar archive as (name, bytes).
std::vector<std::pair<std::string, std::vector<std::uint8_t>>> untar(const std::vector<std::uint8_t>& archive);

/// Inflates gzip data. Throws std::runtime_error on corrupt input.
std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& data);

}  // namespace ssp::cli
