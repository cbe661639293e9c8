#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xrefine/tensor.hpp"

// One plain-text grammar for manifests, checkpoint sidecars, report blocks and
// CLI config files:
//
//   # comment
//   key = value
//
// Keys match [A-Za-z0-9_.-]+ (dots namespace related keys). Values are the
// rest of the line, trimmed. Blank lines are ignored. Duplicate keys are an
// error. Serialization preserves insertion order and round-trips doubles
// exactly (%.17g), so emitted files are byte-stable.

namespace xrefine {

class Manifest {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, long long value);
  void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }
  void set(const std::string& key, uint64_t value);
  void set(const std::string& key, double value);
  void set(const std::string& key, bool value);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;  // throws DataError if missing
  long long get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  static Manifest parse(const std::string& text);
  static Manifest load(const std::filesystem::path& path);

 private:
  const std::string* find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

std::string format_double(double value);  // shortest round-trip decimal form

}  // namespace xrefine
