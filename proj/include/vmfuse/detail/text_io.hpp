#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "vmfuse/error.hpp"

namespace vmfuse::detail {

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view tok, std::size_t line) {
    double v = 0.0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
        throw ParseError(line, "expected a number, got '" + std::string(tok) + "'");
    }
    return v;
}

inline std::int64_t parse_int(std::string_view tok, std::size_t line) {
    std::int64_t v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
        throw ParseError(line, "expected an integer, got '" + std::string(tok) + "'");
    }
    return v;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

/// Reads lines and tracks the 1-based number of the line last returned.
class LineReader {
public:
    explicit LineReader(std::istream& in) : in_(in) {}

    bool next(std::string& line) {
        if (!std::getline(in_, line)) return false;
        ++number_;
        return true;
    }

    std::size_t number() const noexcept { return number_; }

private:
    std::istream& in_;
    std::size_t number_ = 0;
};

/// Parses `key=value` tokens from a header line; order is not preserved.
inline std::map<std::string, std::string> parse_kv_tokens(
    const std::vector<std::string_view>& toks, std::size_t first, std::size_t line) {
    std::map<std::string, std::string> kv;
    for (std::size_t i = first; i < toks.size(); ++i) {
        const auto eq = toks[i].find('=');
        if (eq == std::string_view::npos || eq == 0) {
            throw ParseError(line, "expected key=value, got '" + std::string(toks[i]) + "'");
        }
        kv.emplace(std::string(toks[i].substr(0, eq)), std::string(toks[i].substr(eq + 1)));
    }
    return kv;
}

}  // namespace vmfuse::detail
