#ifndef MULTIFUSE_CONFIG_HPP
#define MULTIFUSE_CONFIG_HPP

// Flat `key = value` configuration with [section] headers, backed by
// boost::property_tree's INI reader/writer. Keys are addressed as
// "section.key".

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "multifuse/errors.hpp"

namespace multifuse {

using Config = boost::property_tree::ptree;

inline Config read_config(const std::filesystem::path& path)
{
    Config cfg;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), cfg);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("config: " + std::string(e.what()));
    }
    return cfg;
}

inline Config parse_config(const std::string& text)
{
    Config cfg;
    std::istringstream is(text);
    try {
        boost::property_tree::ini_parser::read_ini(is, cfg);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("config: " + std::string(e.what()));
    }
    return cfg;
}

inline std::string config_text(const Config& cfg)
{
    std::ostringstream os;
    boost::property_tree::ini_parser::write_ini(os, cfg);
    return os.str();
}

inline void write_config(const std::filesystem::path& path, const Config& cfg)
{
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("config: cannot write " + path.string());
    os << config_text(cfg);
}

/// 64-bit FNV-1a over the text, as lowercase hex.
inline std::string fnv1a_hex(const std::string& text)
{
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

template <class V>
V config_get(const Config& cfg, const std::string& key, V fallback)
{
    try {
        return cfg.get<V>(key, fallback);
    } catch (const boost::property_tree::ptree_bad_data&) {
        throw ConfigError("config: bad value for '" + key + "'");
    }
}

inline std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& key)
{
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        try {
            std::size_t used = 0;
            const long long v = std::stoll(item, &used);
            if (v < 0) throw std::invalid_argument("negative");
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError("config: bad integer list for '" + key + "': " + text);
        }
    }
    return out;
}

inline std::vector<std::size_t> config_get_list(const Config& cfg, const std::string& key,
                                                const std::vector<std::size_t>& fallback)
{
    auto v = cfg.get_optional<std::string>(key);
    if (!v) return fallback;
    return parse_size_list(*v, key);
}

inline std::string join_list(const std::vector<std::size_t>& v)
{
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

} // namespace multifuse

#endif
