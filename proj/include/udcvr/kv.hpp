#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "udcvr/tensor.hpp"

namespace udcvr {

/// Flat key=value text document. Lines starting with '#' are comments.
class KeyValues {
public:
    static KeyValues parse(const std::string& text) {
        KeyValues kv;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw DataError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
            kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return kv;
    }

    static KeyValues load(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw DataError("cannot open " + path.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream f(path);
        if (!f) throw DataError("cannot open " + path.string() + " for writing");
        f << str();
    }

    std::string str() const {
        std::ostringstream os;
        for (const auto& key : order_) os << key << '=' << values_.at(key) << '\n';
        return os.str();
    }

    void set(const std::string& key, std::string value) {
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = std::move(value);
    }
    void set(const std::string& key, const char* value) { set(key, std::string(value)); }
    void set(const std::string& key, double value) { set(key, format(value)); }
    void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }
    void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw DataError("missing key '" + key + "'");
        return it->second;
    }

    double get_double(const std::string& key) const { return to_double(key, get(key)); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }
    std::uint64_t get_u64(const std::string& key) const {
        const auto& s = get(key);
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size())
            throw DataError("key '" + key + "': expected an unsigned integer, got '" + s + "'");
        return v;
    }
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        return has(key) ? get_u64(key) : fallback;
    }
    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const auto& s = get(key);
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw DataError("key '" + key + "': expected true/false, got '" + s + "'");
    }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? get(key) : fallback;
    }

    std::vector<double> get_doubles(const std::string& key) const {
        std::vector<double> out;
        std::istringstream in(get(key));
        std::string item;
        while (std::getline(in, item, ','))
            if (!trim(item).empty()) out.push_back(to_double(key, trim(item)));
        return out;
    }

    const std::vector<std::string>& keys() const { return order_; }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    KeyValues section(const std::string& prefix) const {
        KeyValues out;
        for (const auto& key : order_)
            if (key.rfind(prefix, 0) == 0) out.set(key.substr(prefix.size()), values_.at(key));
        return out;
    }

    void merge(const std::string& prefix, const KeyValues& other) {
        for (const auto& key : other.order_) set(prefix + key, other.values_.at(key));
    }

    /// Shortest text that parses back to the same double.
    static std::string format(double v) {
        char buf[64];
        auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, p);
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static double to_double(const std::string& key, const std::string& s) {
        double v = 0.0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size())
            throw DataError("key '" + key + "': expected a number, got '" + s + "'");
        return v;
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

}  // namespace udcvr
