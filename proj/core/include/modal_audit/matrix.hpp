#pragma once

#include <cstddef>
#include <cstring>
#include <span>
#include <vector>

namespace modal_audit {

// Dense row-major float matrix. Rows are token vectors throughout the library.
struct FloatMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    FloatMatrix() = default;
    FloatMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    void append_row(std::span<const float> r) {
        data.insert(data.end(), r.begin(), r.end());
        ++rows;
    }

    bool operator==(const FloatMatrix&) const = default;
};

// Equality of the underlying bit patterns (distinguishes -0.0 from 0.0, NaN payloads).
inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

inline bool bit_equal(const FloatMatrix& a, const FloatMatrix& b) {
    return a.rows == b.rows && a.cols == b.cols && bit_equal(a.data, b.data);
}

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        double t = static_cast<double>(a[j]) - static_cast<double>(b[j]);
        s += t * t;
    }
    return s;
}

}  // namespace modal_audit
