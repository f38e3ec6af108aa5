#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mrdetr {

// Row-major dense matrix of plain values (no gradient tracking).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    bool empty() const { return rows == 0 || cols == 0; }

    Matrix transposed() const {
        Matrix t(cols, rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
        return t;
    }
};

}  // namespace mrdetr
