#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace lapis {

// Row-major RGB raster, channels in [0,1]. Values are only clamped when the
// image is quantized for 8-bit output, never during arithmetic.
template <class T>
struct BasicImage {
    int width = 0;
    int height = 0;
    std::vector<T> pixels;  // width*height*3

    BasicImage() = default;
    BasicImage(int w, int h, T fill = T(0))
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {
        if (w <= 0 || h <= 0) throw std::invalid_argument("image: non-positive dimensions");
    }

    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * width + x) * 3 + c;
    }
    T& at(int x, int y, int c) { return pixels[index(x, y, c)]; }
    const T& at(int x, int y, int c) const { return pixels[index(x, y, c)]; }

    std::size_t value_count() const { return pixels.size(); }

    bool same_dims(const BasicImage& other) const {
        return width == other.width && height == other.height;
    }

    template <class U>
    BasicImage<U> cast() const {
        BasicImage<U> out(width, height);
        for (std::size_t i = 0; i < pixels.size(); ++i) out.pixels[i] = static_cast<U>(pixels[i]);
        return out;
    }

    friend bool operator==(const BasicImage&, const BasicImage&) = default;
};

using Image = BasicImage<float>;
using ImageD = BasicImage<double>;

}  // namespace lapis
