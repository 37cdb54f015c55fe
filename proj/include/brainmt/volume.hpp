#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "brainmt/common.hpp"

namespace brainmt {

// 4-D volumetric time series, T-major row-major layout (t, h, w, d), with an
// optional shared foreground mask. Spatial extents must be divisible by 16 to
// survive the /16 downsampling of the convolution encoder.
struct Volume4D {
  int T = 0, H = 0, W = 0, D = 0;
  std::vector<double> data;   // T*H*W*D
  std::vector<uint8_t> mask;  // H*W*D, empty when absent
  uint32_t tr_index_origin = 0;

  Volume4D() = default;
  Volume4D(int T, int H, int W, int D, bool with_mask = false);

  int64_t spatial() const { return static_cast<int64_t>(H) * W * D; }
  int64_t size() const { return static_cast<int64_t>(T) * spatial(); }
  double& at(int t, int h, int w, int d) {
    return data[((static_cast<int64_t>(t) * H + h) * W + w) * D + d];
  }
  double at(int t, int h, int w, int d) const {
    return data[((static_cast<int64_t>(t) * H + h) * W + w) * D + d];
  }
  bool has_mask() const { return !mask.empty(); }
  int64_t foreground_count() const;
  void validate() const;  // throws DimError on any invariant violation
};

struct Subject {
  std::string id;
  Volume4D volume;
  int sex_label = 0;               // {0, 1}
  double cognition_score = 0.0;    // z-scored across the dataset
  double raw_roi_correlation = 0;  // pre z-score planted correlation
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  int fold_index = 0;
};

enum class FrameSampling { window, subset };
FrameSampling frame_sampling_from_string(const std::string& s);
std::string to_string(FrameSampling m);

struct SyntheticConfig {
  int n_subjects = 8;
  int H = 32, W = 32, D = 32;
  int T_total = 64;
  uint64_t seed = 0;
  double roi_amplitude = 3.0;   // planted correlated time courses
  double sex_amplitude = 1.0;   // sign-flipped constant blob
  double noise_sigma = 1.0;
  double ar_coeff = 0.5;        // temporal AR(1) smoothing of noise + courses
};

// Sphere of voxels used to plant signals; exposed so tests can recompute the
// planted statistics from emitted volumes.
std::vector<int64_t> roi_voxels_a(int H, int W, int D);
std::vector<int64_t> roi_voxels_b(int H, int W, int D);
std::vector<int64_t> roi_voxels_sex(int H, int W, int D);

// Mean time course over a set of spatial voxel offsets.
std::vector<double> roi_mean_course(const Volume4D& v, const std::vector<int64_t>& voxels);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

// Smooth spatiotemporal noise plus two planted signals: a sex-flipped blob
// and a pair of correlated ROI time courses whose measured correlation
// (z-scored across subjects) is the regression target.
std::vector<Subject> generate_synthetic_dataset(const SyntheticConfig& cfg);

// Global z-score over foreground voxels across all frames; background filled
// with the minimum post-normalization foreground value.
Volume4D zscore_normalize(const Volume4D& v);

// Contiguous random-offset window (default) or a sorted random subset.
Volume4D sample_frames(const Volume4D& v, int T, uint64_t seed,
                       FrameSampling mode = FrameSampling::window);

// Applies one time permutation to all voxels (the frame-shuffled control).
Volume4D shuffle_frames(const Volume4D& v, uint64_t seed);

// Binary format: 32-byte header = magic "BMT4VOL1", u32 T,H,W,D (LE),
// u32 flags (bit0: mask present), u32 tr_index_origin; then f64 payload
// (T-major row-major), then H*W*D mask bytes when flagged.
void save_volume(const Volume4D& v, const std::string& path);
Volume4D load_volume(const std::string& path);

// {id, sex, cognition} sidecar next to a volume file (path + ".json").
void save_sidecar(const std::string& volume_path, const Subject& s);
void load_sidecar(const std::string& volume_path, Subject& s);

// 70/15/15 split (proportions rounded half-up, within one subject).
DatasetSplit make_splits(const std::vector<std::string>& ids, uint64_t seed);

// k disjoint folds; fold i is the test set, with a validation carve-out of
// ~15% of all subjects taken from the remainder.
std::vector<DatasetSplit> make_cv_folds(const std::vector<std::string>& ids, int folds,
                                        uint64_t seed);

struct ManifestRow {
  std::string id, path, split;
  int fold = 0;
};
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::string& path);

}  // namespace brainmt
