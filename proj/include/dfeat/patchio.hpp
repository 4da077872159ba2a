#pragma once

// Image ingestion and the patch dataset pipeline: binary PGM IO, FAST-9
// corner detection with grid-based spatial balancing, patch extraction and
// normalization, rotation/crop augmentation, DFPD dataset files, a synthetic
// dataset generator and triplet batch sampling.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dfeat/common.hpp"
#include "dfeat/net.hpp"

namespace dfeat {

struct GrayImage {
  int width = 0, height = 0;
  std::vector<uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h, 0) {}
  uint8_t at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
  uint8_t& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
};

// Binary PGM ("P5"), maxval up to 255.
GrayImage load_pgm(const std::filesystem::path& path);
void write_pgm(const GrayImage& image, const std::filesystem::path& path);

struct Keypoint {
  int x = 0, y = 0;
  double score = 0.0;
};

// FAST-9 segment test on the 16-pixel radius-3 circle: a corner needs 9
// contiguous circle pixels all brighter than center+t or all darker than
// center-t. Score is the max over valid 9-arcs of the minimal absolute
// difference. NMS keeps 3x3-neighborhood maxima (ties: earliest row-major).
std::vector<Keypoint> fast_detect(const GrayImage& image, int threshold,
                                  bool use_nms);

// Keeps at most `per_cell` highest-score keypoints per grid cell; output is
// cell-major, score-descending within a cell.
std::vector<Keypoint> grid_distribute(const std::vector<Keypoint>& keypoints,
                                      int width, int height, int grid_cols,
                                      int grid_rows, int per_cell);

// "x y score" text lines.
void write_keypoints(const std::vector<Keypoint>& keypoints,
                     const std::filesystem::path& path);
std::vector<Keypoint> read_keypoints(const std::filesystem::path& path);

// Copies the size x size window centered at the keypoint (center at offset
// size/2). With `normalize`, subtracts the patch mean and divides by the
// population standard deviation (+1e-8); a zero-variance patch becomes all
// zeros. BoundaryError when the window leaves the image.
Patch extract_patch(const GrayImage& image, const Keypoint& keypoint,
                    int size = kPatchSize, bool normalize = true);

// Mean/std normalization of raw pixel values, as extract_patch applies.
void normalize_pixels(std::array<double, kPatchSize * kPatchSize>& pixels);

// Rotates the source window (>= 48x48) by a uniform angle in
// [-max_rotation_deg, +max_rotation_deg] about its center with bilinear
// interpolation, center-crops 32x32 and normalizes.
Patch augment(const GrayImage& source_window, Rng& rng, double max_rotation_deg);

// Labeled raw byte patches; the on-disk DFPD payload.
struct PatchDataset {
  static constexpr int kRecordPixels = kPatchSize * kPatchSize;
  struct Record {
    uint32_t label = 0;
    std::array<uint8_t, kRecordPixels> pixels{};
  };
  std::vector<Record> records;
};

// Record bytes -> normalized network-ready patch.
Patch record_to_patch(const PatchDataset::Record& record);

// Checks the training invariants (notably >= 2 views per label).
void validate_dataset(const PatchDataset& dataset);

void write_dataset(const PatchDataset& dataset, const std::filesystem::path& path);
PatchDataset read_dataset(const std::filesystem::path& path);

// One augmented-view dataset entry per keypoint and view: each keypoint
// becomes one label with `views_per_label` rotated/cropped views quantized
// back to bytes.
PatchDataset build_dataset(const std::vector<GrayImage>& images,
                           const std::vector<std::vector<Keypoint>>& keypoints,
                           int views_per_label, Rng& rng,
                           double max_rotation_deg = 25.0);

// Knobs of the synthetic generator: textured random images, FAST keypoints,
// rotated/translated views with photometric jitter.
struct SynthConfig {
  int image_size = 256;
  int fast_threshold = 12;
  int grid_cols = 6, grid_rows = 6, per_cell = 8;
  double max_rotation_deg = 25.0;
  int max_translate_px = 2;
  double min_gain = 0.75, max_gain = 1.25;
  double max_bias = 16.0;
  double max_noise_sigma = 4.0;
  int texture_levels = 5;
  int blur_passes = 2;
};

PatchDataset synthesize_dataset(int label_count, int views_per_label, Rng& rng,
                                const SynthConfig& config = {});

// The synthetic generator's source image, exposed for the CLI detect demo.
GrayImage synthesize_image(Rng& rng, const SynthConfig& config = {});

// Matched anchor/positive patch pairs with pairwise-distinct labels.
struct TripletBatch {
  std::vector<Patch> anchors, positives;
  std::vector<uint32_t> labels;
  int size() const { return static_cast<int>(labels.size()); }
};

// Draws `batch_size` distinct labels without replacement, then two distinct
// views per label. DegenerateError when the dataset has too few labels.
TripletBatch sample_batch(const PatchDataset& dataset, int batch_size, Rng& rng);

}  // namespace dfeat
