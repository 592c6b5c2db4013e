#pragma once

#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace draftlab {

// Flat key=value config text. '#' starts a comment; blank lines are skipped;
// duplicate keys are errors. Typed access goes through a schema so unknown
// keys and malformed values fail loudly instead of being ignored.

using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace detail

inline KeyValues parse_config_string(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw std::invalid_argument("config: duplicate key " + key);
        kv[key] = val;
    }
    return kv;
}

inline KeyValues parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_string(ss.str());
}

class ConfigSchema {
public:
    void add_int(const std::string& key, int* target) {
        setters_[key] = [key, target](const std::string& v) { *target = static_cast<int>(parse_int(key, v)); };
    }
    void add_int64(const std::string& key, int64_t* target) {
        setters_[key] = [key, target](const std::string& v) { *target = parse_int(key, v); };
    }
    void add_double(const std::string& key, double* target) {
        setters_[key] = [key, target](const std::string& v) {
            size_t pos = 0;
            double d;
            try {
                d = std::stod(v, &pos);
            } catch (const std::exception&) {
                throw std::invalid_argument("config: key " + key + ": not a number: " + v);
            }
            if (pos != v.size()) throw std::invalid_argument("config: key " + key + ": not a number: " + v);
            *target = d;
        };
    }
    void add_bool(const std::string& key, bool* target) {
        setters_[key] = [key, target](const std::string& v) {
            if (v == "true" || v == "1") *target = true;
            else if (v == "false" || v == "0") *target = false;
            else throw std::invalid_argument("config: key " + key + ": expected true/false: " + v);
        };
    }
    void add_string(const std::string& key, std::string* target) {
        setters_[key] = [target](const std::string& v) { *target = v; };
    }
    void add_custom(const std::string& key, std::function<void(const std::string&)> setter) {
        setters_[key] = std::move(setter);
    }

    // Applies every key; unknown keys are errors.
    void apply(const KeyValues& kv) const {
        for (const auto& [key, val] : kv) {
            auto it = setters_.find(key);
            if (it == setters_.end()) throw std::invalid_argument("config: unknown key " + key);
            it->second(val);
        }
    }

private:
    static int64_t parse_int(const std::string& key, const std::string& v) {
        size_t pos = 0;
        int64_t n;
        try {
            n = std::stoll(v, &pos);
        } catch (const std::exception&) {
            throw std::invalid_argument("config: key " + key + ": not an integer: " + v);
        }
        if (pos != v.size()) throw std::invalid_argument("config: key " + key + ": not an integer: " + v);
        return n;
    }

    std::map<std::string, std::function<void(const std::string&)>> setters_;
};

}  // namespace draftlab
