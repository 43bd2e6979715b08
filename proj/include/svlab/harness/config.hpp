#pragma once

// Flat key=value configuration. Lines are `key = value`; `#` starts a
// comment. Layers are merged with later sources winning, so callers apply
// defaults, then the file, then command-line flags.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace svlab::harness {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

class KeyValues {
public:
    static KeyValues parse(const std::string& text, const std::string& source = "<config>") {
        KeyValues kv;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
            }
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
            kv.values_[key] = trim(line.substr(eq + 1));
        }
        return kv;
    }

    static KeyValues from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    bool has(const std::string& key) const { return values_.count(key) > 0; }
    const std::map<std::string, std::string>& entries() const { return values_; }

    // Entries of `over` replace ours.
    void merge(const KeyValues& over) {
        for (const auto& [k, v] : over.values_) values_[k] = v;
    }

    std::string str(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return to_u64(key, it->second);
    }

    double f64(const std::string& key, double fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + it->second + "'");
        }
    }

    bool flag(const std::string& key, bool fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const auto& v = it->second;
        if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
        if (v == "0" || v == "false" || v == "no" || v == "off") return false;
        throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
    }

    std::vector<std::string> list(const std::string& key, const std::vector<std::string>& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : split_list(it->second);
    }

    std::vector<std::size_t> sizes(const std::string& key, const std::vector<std::size_t>& fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<std::size_t> out;
        for (const auto& s : split_list(it->second)) out.push_back(static_cast<std::size_t>(to_u64(key, s)));
        return out;
    }

    // Sorted `key = value` lines; parse(dump()) reproduces the entries.
    std::string dump() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

private:
    static std::uint64_t to_u64(const std::string& key, const std::string& v) {
        try {
            if (v.empty() || v[0] == '-') throw std::invalid_argument("sign");
            std::size_t used = 0;
            const auto x = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument("trailing");
            return x;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
        }
    }

    std::map<std::string, std::string> values_;
};

// Turns `--key value` / `--key=value` pairs into entries. A flag followed by
// another flag (or nothing) is read as `true`.
inline KeyValues parse_flags(const std::vector<std::string>& args) {
    KeyValues kv;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        if (a.rfind("--", 0) != 0 || a.size() < 3) throw ConfigError("unexpected argument '" + a + "'");
        const std::string body = a.substr(2);
        if (const auto eq = body.find('='); eq != std::string::npos) {
            kv.set(body.substr(0, eq), body.substr(eq + 1));
        } else if (i + 1 < args.size() && args[i + 1].rfind("--", 0) != 0) {
            kv.set(body, args[++i]);
        } else {
            kv.set(body, "true");
        }
    }
    return kv;
}

}  // namespace svlab::harness
