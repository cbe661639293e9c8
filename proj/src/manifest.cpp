#include "xrefine/manifest.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace xrefine {
namespace {

bool valid_key(const std::string& key) {
  if (key.empty()) return false;
  for (const char c : key)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-'))
      return false;
  return true;
}

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

void Manifest::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) throw DataError("manifest: invalid key '" + key + "'");
  if (value.find('\n') != std::string::npos)
    throw DataError("manifest: value for '" + key + "' contains a newline");
  if (find(key)) throw DataError("manifest: duplicate key '" + key + "'");
  entries_.emplace_back(key, trim(value));
}

void Manifest::set(const std::string& key, long long value) { set(key, std::to_string(value)); }
void Manifest::set(const std::string& key, uint64_t value) { set(key, std::to_string(value)); }
void Manifest::set(const std::string& key, double value) { set(key, format_double(value)); }
void Manifest::set(const std::string& key, bool value) {
  set(key, std::string(value ? "true" : "false"));
}

const std::string* Manifest::find(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return &v;
  return nullptr;
}

bool Manifest::has(const std::string& key) const { return find(key) != nullptr; }

const std::string& Manifest::get(const std::string& key) const {
  const std::string* v = find(key);
  if (!v) throw DataError("manifest: missing key '" + key + "'");
  return *v;
}

long long Manifest::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    size_t pos = 0;
    const long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw DataError("manifest: key '" + key + "' is not an integer: '" + v + "'");
  }
}

uint64_t Manifest::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    size_t pos = 0;
    const uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw DataError("manifest: key '" + key + "' is not an unsigned integer: '" + v + "'");
  }
}

double Manifest::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw DataError("manifest: key '" + key + "' is not a number: '" + v + "'");
  }
}

bool Manifest::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw DataError("manifest: key '" + key + "' is not a boolean: '" + v + "'");
}

std::string Manifest::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

void Manifest::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open manifest for writing: " + path.string());
  os << serialize();
  if (!os) throw DataError("failed writing manifest: " + path.string());
}

Manifest Manifest::parse(const std::string& text) {
  Manifest m;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw DataError("manifest: line " + std::to_string(line_no) + " has no '='");
    const std::string key = trim(t.substr(0, eq));
    if (!valid_key(key))
      throw DataError("manifest: line " + std::to_string(line_no) + " has invalid key '" + key +
                      "'");
    m.set(key, t.substr(eq + 1));
  }
  return m;
}

Manifest Manifest::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open manifest: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse(buf.str());
}

}  // namespace xrefine
