#pragma once

#include "flat/forward.hpp"
#include "flat/model.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace flat {

/// Activation statistics accumulated over all calibration batches.
/// Every c_* entry is a Gram-matrix sum and stays symmetric PSD; x_in/x_out
/// hold (possibly subsampled) per-layer hidden-state rows for cosine scoring.
struct CalibrationCapture {
    ModelConfig config;
    std::vector<std::vector<Mat>> c_v; // [L][G], d_head x d_head
    std::vector<std::vector<Mat>> c_q; // [L][H], d_head x d_head
    std::vector<std::vector<Mat>> c_k; // [L][G], d_head x d_head
    std::vector<Mat> c_sigma;          // [L], d_int x d_int (post-SiLU Gram)
    std::vector<Mat> x_in;             // [L], rows x d_hid
    std::vector<Mat> x_out;            // [L], rows x d_hid
};

/// Per-decoder importance: t[l] = arccos(c[l]) / pi, the normalized angular
/// deviation between a decoder's input and output hidden states.
struct ImportanceScores {
    Vec t; // length L, each in [0, 1]
    Vec c; // mean cosine similarity per layer (diagnostic)
};

struct CalibrationOptions {
    // Cap on retained hidden-state rows per layer; rows beyond the cap are
    // dropped by deterministic stride subsampling over the whole batch list.
    Index max_retained_rows = 4096;
    // Batches are processed in fixed chunks and partial captures merged in
    // chunk order, so a given thread count always reproduces its own bytes.
    int threads = 1;
};

template <typename ModelT>
CalibrationCapture run_calibration(const ModelT& model, const std::vector<CalibrationBatch>& batches,
                                   const CalibrationOptions& opts = {});

ImportanceScores importance_scores(const CalibrationCapture& capture);

/// Synthetic calibration inputs: standard-normal hidden states.
std::vector<CalibrationBatch> synthetic_batches(const ModelConfig& cfg, int n_batches,
                                                Index tokens, std::uint64_t seed);

// Calibration container file: a fixed header (magic, batch count, tokens,
// d_hid) followed by the batches as little-endian row-major f64.
void save_calibration_file(const std::vector<CalibrationBatch>& batches,
                           const std::filesystem::path& path);
std::vector<CalibrationBatch> load_calibration_file(const std::filesystem::path& path);

} // namespace flat
