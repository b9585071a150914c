#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace pspde {

/// Generator for stream (base, ids...). Distinct id tuples give independent
/// seeds; the same tuple always gives the same sequence.
inline std::mt19937_64 make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> ids) {
    std::vector<std::uint32_t> words;
    words.push_back(static_cast<std::uint32_t>(base));
    words.push_back(static_cast<std::uint32_t>(base >> 32));
    for (std::uint64_t id : ids) {
        words.push_back(static_cast<std::uint32_t>(id));
        words.push_back(static_cast<std::uint32_t>(id >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

}  // namespace pspde
