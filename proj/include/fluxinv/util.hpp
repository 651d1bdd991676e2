#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fluxinv {

/// FNV-1a, 64-bit. Stable across platforms; used for content and config hashes.
class Hasher {
 public:
  Hasher& bytes(const void* data, std::size_t n);
  Hasher& str(std::string_view s);
  Hasher& u64(std::uint64_t v);
  Hasher& f64(double v);
  Hasher& f64s(std::span<const double> v);
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

using Rng = std::mt19937_64;

/// Seed for a named substream of a master seed. Distinct names give
/// statistically independent streams; the mapping is a pure function.
std::uint64_t substream_seed(std::uint64_t master, std::string_view name);
Rng make_rng(std::uint64_t master, std::string_view name);

/// Minimal delimited-text table: one header row, comma separated, '#' comments.
struct TextTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws IoError naming the file when absent.
  std::size_t column(std::string_view name) const;
  std::string source;
};

TextTable read_table(const std::filesystem::path& path);
TextTable parse_table(std::string_view text, std::string source = "<memory>");

double parse_double(const std::string& s, std::string_view context);
long long parse_int(const std::string& s, std::string_view context);

/// Shortest round-trip representation of a double.
std::string format_double(double v);

std::string read_file(const std::filesystem::path& path);

/// Little-endian binary encoding used by every cache and matrix file.
class BinaryWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> v);
  void raw(std::string_view bytes) { buf_.append(bytes); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

/// Throws IoError on truncated input.
class BinaryReader {
 public:
  explicit BinaryReader(std::string_view data) : data_(data) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void f64s(std::span<double> out);
  std::string_view raw(std::size_t n);
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace fluxinv
