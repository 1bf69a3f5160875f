#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <random>

namespace flat {

// Row-major throughout: rows are tokens/samples, and the checkpoint format
// stores row-major buffers, so serialization is a straight memcpy.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

using Rng = std::mt19937_64;

inline bool all_finite(const Mat& m) { return m.allFinite(); }
inline bool all_finite(const Vec& v) { return v.allFinite(); }

// ||a - b||_F / max(||b||_F, floor). The floor keeps zero references usable.
inline double rel_fro_error(const Mat& a, const Mat& b, double floor = 1e-300) {
    return (a - b).norm() / std::max(b.norm(), floor);
}

inline double max_abs(const Mat& m) {
    return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

inline Mat gaussian_matrix(Index rows, Index cols, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Mat m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j)
            m(i, j) = dist(rng);
    return m;
}

// Derives an independent stream seed from a master seed (splitmix64 step).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace flat
