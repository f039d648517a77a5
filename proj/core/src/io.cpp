#include "pcmamba/io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pcm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string format_num(double v) {
  // integers render without a decimal point so counts stay greppable
  if (v == static_cast<double>(static_cast<long long>(v)) && std::abs(v) < 1e15)
    return std::to_string(static_cast<long long>(v));
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void KvFile::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : items_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  items_.emplace_back(key, value);
}

void KvFile::set_num(const std::string& key, double value) { set(key, format_num(value)); }

bool KvFile::has(const std::string& key) const {
  for (const auto& [k, v] : items_)
    if (k == key) return true;
  return false;
}

const std::string& KvFile::get(const std::string& key) const {
  for (const auto& [k, v] : items_)
    if (k == key) return v;
  throw std::runtime_error("manifest: missing key '" + key + "'");
}

std::string KvFile::get_or(const std::string& key, const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

double KvFile::get_num(const std::string& key) const {
  const std::string& s = get(key);
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size())
    throw std::runtime_error("manifest: key '" + key + "' is not numeric: '" + s + "'");
  return v;
}

double KvFile::get_num_or(const std::string& key, double fallback) const {
  return has(key) ? get_num(key) : fallback;
}

std::string KvFile::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : items_) os << k << " = " << v << "\n";
  return os.str();
}

KvFile KvFile::parse(const std::string& text) {
  KvFile f;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("manifest: line " + std::to_string(lineno) +
                               " has no '=': " + t);
    const std::string key = trim(t.substr(0, eq));
    if (key.empty())
      throw std::runtime_error("manifest: line " + std::to_string(lineno) + " has empty key");
    f.items_.emplace_back(key, trim(t.substr(eq + 1)));
  }
  return f;
}

KvFile KvFile::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse(buf.str());
}

void KvFile::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("manifest: cannot write " + path);
  os << serialize();
}

}  // namespace pcm
