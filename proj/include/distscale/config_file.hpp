// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace distscale {

/// Declarative key-value config with [section] headers and '#' comments.
/// Every key must be consumed by the loader; unknown keys are an error.
class ConfigFile {
public:
    static ConfigFile parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open config file: " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return parse_string(ss.str(), path);
    }

    static ConfigFile parse_string(const std::string& text, const std::string& name = "<config>") {
        ConfigFile cfg;
        cfg.name_ = name;
        std::istringstream is(text);
        std::string line, section;
        int line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            if (trimmed.front() == '[') {
                if (trimmed.back() != ']')
                    throw std::runtime_error(name + ":" + std::to_string(line_no) +
                                             ": malformed section header");
                section = trim(trimmed.substr(1, trimmed.size() - 2));
                continue;
            }
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(name + ":" + std::to_string(line_no) +
                                         ": expected key = value");
            const std::string key = section + "." + trim(trimmed.substr(0, eq));
            if (cfg.values_.count(key))
                throw std::runtime_error(name + ":" + std::to_string(line_no) +
                                         ": duplicate key " + key);
            cfg.values_[key] = trim(trimmed.substr(eq + 1));
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end()) throw std::runtime_error(name_ + ": missing key " + key);
        consumed_.insert(key);
        return it->second;
    }

    std::string get_string_or(const std::string& key, const std::string& fallback) {
        return has(key) ? get_string(key) : fallback;
    }

    std::int64_t get_int(const std::string& key) {
        return parse_int(get_string(key), key);
    }

    std::int64_t get_int_or(const std::string& key, std::int64_t fallback) {
        return has(key) ? get_int(key) : fallback;
    }

    double get_double(const std::string& key) {
        const std::string s = get_string(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error(name_ + ": key " + key + ": not a number: '" + s + "'");
        }
    }

    double get_double_or(const std::string& key, double fallback) {
        return has(key) ? get_double(key) : fallback;
    }

    bool get_bool_or(const std::string& key, bool fallback) {
        if (!has(key)) return fallback;
        const std::string s = get_string(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw std::runtime_error(name_ + ": key " + key + ": not a boolean: '" + s + "'");
    }

    /// Comma-separated integers; "a..b" expands to the inclusive range.
    std::vector<std::int64_t> get_int_list(const std::string& key) {
        const std::string s = get_string(key);
        std::vector<std::int64_t> out;
        std::size_t pos = 0;
        while (pos <= s.size()) {
            auto comma = s.find(',', pos);
            if (comma == std::string::npos) comma = s.size();
            const std::string item = trim(s.substr(pos, comma - pos));
            if (!item.empty()) {
                if (const auto dots = item.find(".."); dots != std::string::npos) {
                    const std::int64_t lo = parse_int(trim(item.substr(0, dots)), key);
                    const std::int64_t hi = parse_int(trim(item.substr(dots + 2)), key);
                    if (hi < lo) throw std::runtime_error(name_ + ": key " + key + ": empty range");
                    for (std::int64_t v = lo; v <= hi; ++v) out.push_back(v);
                } else {
                    out.push_back(parse_int(item, key));
                }
            }
            pos = comma + 1;
        }
        if (out.empty()) throw std::runtime_error(name_ + ": key " + key + ": empty list");
        return out;
    }

    std::vector<std::int64_t> get_int_list_or(const std::string& key,
                                              std::vector<std::int64_t> fallback) {
        return has(key) ? get_int_list(key) : std::move(fallback);
    }

    /// Errors out if any key was never consumed by the loader.
    void reject_unknown_keys() const {
        for (const auto& [key, value] : values_)
            if (!consumed_.count(key))
                throw std::runtime_error(name_ + ": unknown key " + key);
    }

    /// Canonical serialization of all keys, used for the config hash.
    std::string canonical() const {
        std::string out;
        for (const auto& [key, value] : values_) out += key + "=" + value + "\n";
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto begin = s.find_first_not_of(" \t\r");
        if (begin == std::string::npos) return "";
        const auto end = s.find_last_not_of(" \t\r");
        return s.substr(begin, end - begin + 1);
    }

    std::int64_t parse_int(const std::string& s, const std::string& key) const {
        try {
            std::size_t used = 0;
            const std::int64_t v = std::stoll(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error(name_ + ": key " + key + ": not an integer: '" + s + "'");
        }
    }

    std::string name_;
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

inline std::string fnv1a_hex(const std::string& data) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace distscale
