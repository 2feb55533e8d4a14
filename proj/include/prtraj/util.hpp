#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace prtraj::util {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Bad user-supplied data (files, flags, coordinates). CLI maps this to exit 1.
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Internal failure at runtime (I/O, provider, NaN loss). CLI maps this to exit 2.
struct RuntimeError : std::runtime_error {
  explicit RuntimeError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

void set_log_level(LogLevel level);
LogLevel log_level();
void log(LogLevel level, const std::string& msg);

inline void log_debug(const std::string& msg) { log(LogLevel::Debug, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::Info, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::Warn, msg); }
inline void log_error(const std::string& msg) { log(LogLevel::Error, msg); }

// ---------------------------------------------------------------------------
// Strings
// ---------------------------------------------------------------------------

std::vector<std::string> split(std::string_view s, char sep);
/// Split into at most `max_fields` pieces; the last piece keeps any further
/// separators verbatim (lets free-text final CSV columns contain commas).
std::vector<std::string> split_limit(std::string_view s, char sep, std::size_t max_fields);
std::string trim(std::string_view s);
bool starts_with(std::string_view s, std::string_view prefix);

double parse_double(const std::string& s, const std::string& what);
long long parse_int(const std::string& s, const std::string& what);

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);
std::vector<std::string> read_lines(const std::string& path);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);

// ---------------------------------------------------------------------------
// Hashing & seeding
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view data);
std::uint64_t splitmix64(std::uint64_t x);
/// Stable derived seed for a named stream (init streams, per-epoch workers...).
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

std::string sha256_hex(std::string_view data);
std::string sha256_file_hex(const std::string& path);

}  // namespace prtraj::util
