#pragma once
// Sinusoidal positional encodings: the classic 1-D table for token sequences
// and a 2-D per-axis table for flattened image feature maps. Tables are pure
// data, computed once in double precision.

#include "tig/tensor.hpp"

namespace tig {

// (length, c): channel 2k = sin(pos * w_k), 2k+1 = cos(pos * w_k),
// w_k = 10000^(-2k/c).
template <class T>
Array<T> pos_encode_1d(int length, int c) {
    TIG_CHECK(c > 0 && c % 2 == 0, "pos_encode_1d: channel count must be even");
    Array<T> table({length, c});
    for (int p = 0; p < length; ++p)
        for (int k = 0; 2 * k < c; ++k) {
            const double w = std::pow(10000.0, -2.0 * k / c);
            table[long(p) * c + 2 * k] = T(std::sin(p * w));
            table[long(p) * c + 2 * k + 1] = T(std::cos(p * w));
        }
    return table;
}

enum class PosMode {
    symmetric,      // both axes get the full frequency range 10000^(-4k/c)
    paper_literal,  // x half keeps exponent 2i/c and the swapped sin/cos roles
};

// (h*w, c) with row index y*w + x. First c/2 channels encode y (constant
// across x), last c/2 encode x.
template <class T>
Array<T> pos_encode_2d(int h, int w, int c, PosMode mode = PosMode::symmetric) {
    TIG_CHECK(c > 0 && c % 4 == 0, "pos_encode_2d: channel count must be divisible by 4");
    Array<T> table({h * w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T* row = table.data() + (long(y) * w + x) * c;
            if (mode == PosMode::symmetric) {
                for (int k = 0; 4 * k < c; ++k) {
                    const double omega = std::pow(10000.0, -4.0 * k / c);
                    row[2 * k] = T(std::sin(y * omega));
                    row[2 * k + 1] = T(std::cos(y * omega));
                    row[c / 2 + 2 * k] = T(std::sin(x * omega));
                    row[c / 2 + 2 * k + 1] = T(std::cos(x * omega));
                }
            } else {
                // 1-based i; channel pair (2i-1, 2i) maps to 0-based (2i-2, 2i-1)
                for (int i = 1; i <= c / 4; ++i) {
                    const double omega = std::pow(10000.0, -4.0 * i / c);
                    row[2 * i - 2] = T(std::cos(y * omega));
                    row[2 * i - 1] = T(std::sin(y * omega));
                }
                for (int i = c / 4 + 1; i <= c / 2; ++i) {
                    const double omega = std::pow(10000.0, -2.0 * i / c);
                    row[2 * i - 2] = T(std::sin(x * omega));
                    row[2 * i - 1] = T(std::cos(x * omega));
                }
            }
        }
    return table;
}

// Elementwise sum of a (…, d, c) feature tensor and a (d, c) table. No
// learned parameters; gradients pass through unchanged.
template <class T>
Tensor<T> add_encoding(Tensor<T> f, const Array<T>& table) {
    return add(f, f.tp->constant(table));
}

}  // namespace tig
