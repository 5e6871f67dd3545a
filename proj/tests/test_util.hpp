#pragma once

// Shared fixtures for the test suites: profile packs are expensive enough
// (a few thousand adaptive ODE segments) that each (d, n, y_max) combination
// is solved once per process and cached.

#include <map>
#include <memory>
#include <tuple>

#include "blowup/profile.hpp"

namespace testutil {

inline std::shared_ptr<const blowup::ProfilePack>
cached_pack_ptr(int d, std::size_t n = 2049, double y_min = 1e-4, double y_max = 1e4) {
    using Key = std::tuple<int, std::size_t, double, double>;
    static std::map<Key, std::shared_ptr<const blowup::ProfilePack>> cache;
    const Key key{d, n, y_min, y_max};
    auto it = cache.find(key);
    if (it == cache.end()) {
        auto grid = blowup::make_grid(d, y_min, y_max, n);
        it = cache.emplace(key, std::make_shared<blowup::ProfilePack>(blowup::solve_Q(grid))).first;
    }
    return it->second;
}

inline const blowup::ProfilePack& cached_pack(int d, std::size_t n = 2049,
                                              double y_min = 1e-4, double y_max = 1e4) {
    return *cached_pack_ptr(d, n, y_min, y_max);
}

} // namespace testutil
