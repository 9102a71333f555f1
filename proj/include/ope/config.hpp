#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ope/errors.hpp"

namespace ope {

// Flat key = value text config. '#' starts a comment, blank lines are
// skipped, duplicate keys are errors. Every getter marks its key as
// consumed; finish() then rejects leftovers, so misspelled keys fail loudly
// instead of silently applying defaults.
class ConfigMap {
  public:
    static ConfigMap from_string(const std::string& text, const std::string& origin = "<string>");
    static ConfigMap from_file(const std::string& path);

    bool has(const std::string& key) const;

    std::string get_string(const std::string& key);
    std::string get_string(const std::string& key, const std::string& fallback);
    double get_double(const std::string& key);
    double get_double(const std::string& key, double fallback);
    long get_int(const std::string& key);
    long get_int(const std::string& key, long fallback);
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
    bool get_bool(const std::string& key, bool fallback);

    std::vector<std::string> unused_keys() const;
    // Throws config_error naming every key no getter asked for.
    void finish() const;

    const std::string& origin() const { return origin_; }

  private:
    std::map<std::string, std::string> kv_;
    std::set<std::string> used_;
    std::string origin_;

    const std::string& raw(const std::string& key);
};

} // namespace ope
