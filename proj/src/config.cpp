#include "ope/config.hpp"

#include <cctype>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ope {

namespace {

std::string trim(const std::string& s) {
    std::size_t lo = 0, hi = s.size();
    while (lo < hi && std::isspace(static_cast<unsigned char>(s[lo]))) ++lo;
    while (hi > lo && std::isspace(static_cast<unsigned char>(s[hi - 1]))) --hi;
    return s.substr(lo, hi - lo);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
            return false;
    }
    return true;
}

} // namespace

ConfigMap ConfigMap::from_string(const std::string& text, const std::string& origin) {
    ConfigMap cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw config_error(origin + " line " + std::to_string(lineno) +
                               ": expected 'key = value'");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (!valid_key(key))
            throw config_error(origin + " line " + std::to_string(lineno) + ": bad key '" + key +
                               "'");
        if (!cfg.kv_.emplace(key, value).second)
            throw config_error(origin + " line " + std::to_string(lineno) + ": duplicate key '" +
                               key + "'");
    }
    return cfg;
}

ConfigMap ConfigMap::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw input_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str(), path);
}

bool ConfigMap::has(const std::string& key) const { return kv_.count(key) != 0; }

const std::string& ConfigMap::raw(const std::string& key) {
    const auto it = kv_.find(key);
    if (it == kv_.end())
        throw config_error(origin_ + ": missing required key '" + key + "'");
    used_.insert(key);
    return it->second;
}

std::string ConfigMap::get_string(const std::string& key) { return raw(key); }

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    return raw(key);
}

double ConfigMap::get_double(const std::string& key) {
    const std::string& v = raw(key);
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0' || errno == ERANGE)
        throw config_error(origin_ + ": key '" + key + "' is not a number: '" + v + "'");
    return x;
}

double ConfigMap::get_double(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    return get_double(key);
}

long ConfigMap::get_int(const std::string& key) {
    const std::string& v = raw(key);
    errno = 0;
    char* end = nullptr;
    const long x = std::strtol(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0' || errno == ERANGE)
        throw config_error(origin_ + ": key '" + key + "' is not an integer: '" + v + "'");
    return x;
}

long ConfigMap::get_int(const std::string& key, long fallback) {
    if (!has(key)) return fallback;
    return get_int(key);
}

std::uint64_t ConfigMap::get_u64(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const std::string& v = raw(key);
    errno = 0;
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0' || errno == ERANGE)
        throw config_error(origin_ + ": key '" + key + "' is not an unsigned integer: '" + v +
                           "'");
    return static_cast<std::uint64_t>(x);
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    std::string v = raw(key);
    for (char& c : v) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error(origin_ + ": key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<std::string> ConfigMap::unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : kv_) {
        (void)v;
        if (!used_.count(k)) out.push_back(k);
    }
    return out;
}

void ConfigMap::finish() const {
    const auto leftovers = unused_keys();
    if (leftovers.empty()) return;
    std::string msg = origin_ + ": unknown key(s):";
    for (const auto& k : leftovers) msg += " '" + k + "'";
    throw config_error(msg);
}

} // namespace ope
