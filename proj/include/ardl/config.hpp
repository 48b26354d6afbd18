#pragma once

// Minimal TOML-style config: [section] headers, key = value pairs with
// strings, booleans, numbers and flat arrays, and # comments. Parsed into a
// JSON tree. The Reader tracks key consumption so unknown keys are errors
// and missing required keys are reported with their full path.

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ardl::cfg {

using nlohmann::json;

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

inline json parse_scalar(const std::string& raw, int line_no) {
    const std::string v = trim(raw);
    if (v.empty()) throw ConfigError("config line " + std::to_string(line_no) +
                                     ": empty value");
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"')
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": unterminated string");
        return v.substr(1, v.size() - 2);
    }
    if (v == "true") return true;
    if (v == "false") return false;
    try {
        size_t used = 0;
        if (v.find_first_of(".eE") == std::string::npos &&
            v.find("inf") == std::string::npos &&
            v.find("nan") == std::string::npos) {
            const long long i = std::stoll(v, &used);
            if (used == v.size()) return i;
        }
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("config line " + std::to_string(line_no) +
                      ": cannot parse value '" + v + "'");
}

inline json parse_value(const std::string& raw, int line_no) {
    const std::string v = trim(raw);
    if (!v.empty() && v.front() == '[') {
        if (v.back() != ']')
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": unterminated array");
        json arr = json::array();
        std::string body = v.substr(1, v.size() - 2);
        std::string cur;
        bool in_string = false;
        for (char ch : body) {
            if (ch == '"') in_string = !in_string;
            if (ch == ',' && !in_string) {
                if (!trim(cur).empty()) arr.push_back(parse_scalar(cur, line_no));
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (!trim(cur).empty()) arr.push_back(parse_scalar(cur, line_no));
        return arr;
    }
    return parse_scalar(v, line_no);
}

inline json* descend(json& root, const std::string& dotted, bool create) {
    json* node = &root;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
        part = trim(part);
        if (part.empty()) return nullptr;
        if (!node->contains(part)) {
            if (!create) return nullptr;
            (*node)[part] = json::object();
        }
        node = &(*node)[part];
    }
    return node;
}

}  // namespace detail

inline json parse_toml(std::istream& in) {
    json root = json::object();
    std::string section;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = detail::trim(detail::strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": bad section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            detail::descend(root, section, true);
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": empty key");
        const std::string full = section.empty() ? key : section + "." + key;
        json* slot = detail::descend(root, full, true);
        *slot = detail::parse_value(line.substr(eq + 1), line_no);
    }
    return root;
}

inline json parse_toml_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse_toml(in);
}

/// Typed access with consumption tracking: every leaf must be read (or be a
/// known optional) or done() reports it as an unknown key.
class Reader {
public:
    explicit Reader(json root) : root_(std::move(root)) {}

    bool has(const std::string& path) const {
        const json* n = find(path);
        return n != nullptr && !n->is_object();
    }

    double number(const std::string& path) {
        const json* n = require(path);
        if (!n->is_number())
            throw ConfigError("config field " + path + ": expected a number");
        return n->get<double>();
    }
    double number_or(const std::string& path, double def) {
        return has(path) ? number(path) : def;
    }

    long integer(const std::string& path) {
        const json* n = require(path);
        if (!n->is_number_integer())
            throw ConfigError("config field " + path + ": expected an integer");
        return n->get<long>();
    }
    long integer_or(const std::string& path, long def) {
        return has(path) ? integer(path) : def;
    }

    bool boolean_or(const std::string& path, bool def) {
        if (!has(path)) return def;
        const json* n = require(path);
        if (!n->is_boolean())
            throw ConfigError("config field " + path + ": expected a boolean");
        return n->get<bool>();
    }

    std::string string(const std::string& path) {
        const json* n = require(path);
        if (!n->is_string())
            throw ConfigError("config field " + path + ": expected a string");
        return n->get<std::string>();
    }
    std::string string_or(const std::string& path, const std::string& def) {
        return has(path) ? string(path) : def;
    }

    std::vector<double> number_array(const std::string& path) {
        const json* n = require(path);
        if (!n->is_array())
            throw ConfigError("config field " + path + ": expected an array");
        std::vector<double> out;
        for (const auto& v : *n) {
            if (!v.is_number())
                throw ConfigError("config field " + path +
                                  ": expected numeric array");
            out.push_back(v.get<double>());
        }
        return out;
    }
    std::vector<double> number_array_or(const std::string& path,
                                        std::vector<double> def) {
        return has(path) ? number_array(path) : std::move(def);
    }

    std::vector<long> integer_array_or(const std::string& path,
                                       std::vector<long> def) {
        if (!has(path)) return def;
        const json* n = require(path);
        std::vector<long> out;
        for (const auto& v : *n) out.push_back(v.get<long>());
        return out;
    }

    /// Errors on any key present in the file but never read.
    void done() const {
        std::vector<std::string> unknown;
        collect_unknown(root_, "", unknown);
        if (!unknown.empty())
            throw ConfigError("unknown config key: " + unknown.front());
    }

private:
    const json* find(const std::string& path) const {
        const json* node = &root_;
        std::stringstream ss(path);
        std::string part;
        while (std::getline(ss, part, '.')) {
            if (!node->is_object() || !node->contains(part)) return nullptr;
            node = &(*node)[part];
        }
        return node;
    }

    const json* require(const std::string& path) {
        const json* n = find(path);
        if (n == nullptr || n->is_object())
            throw ConfigError("missing config field: " + path);
        consumed_.insert(path);
        return n;
    }

    void collect_unknown(const json& node, const std::string& prefix,
                         std::vector<std::string>& out) const {
        if (!node.is_object()) {
            if (consumed_.find(prefix) == consumed_.end()) out.push_back(prefix);
            return;
        }
        for (auto it = node.begin(); it != node.end(); ++it)
            collect_unknown(it.value(),
                            prefix.empty() ? it.key() : prefix + "." + it.key(),
                            out);
    }

    json root_;
    std::set<std::string> consumed_;
};

}  // namespace ardl::cfg
