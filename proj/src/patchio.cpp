#include "dfeat/patchio.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

namespace dfeat {

namespace {

constexpr uint32_t kDatasetVersion = 1;

// --- PGM -------------------------------------------------------------------

struct PgmCursor {
  const std::string& buf;
  size_t off = 0;
  const std::string& source;

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source + ": " + what + " at byte offset " +
                      std::to_string(off));
  }
  bool eof() const { return off >= buf.size(); }
  char peek() const { return buf[off]; }

  void skip_space_and_comments() {
    while (!eof()) {
      const char c = peek();
      if (c == '#') {
        while (!eof() && peek() != '\n') ++off;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++off;
      } else {
        break;
      }
    }
  }

  int read_number(const char* what) {
    skip_space_and_comments();
    if (eof() || peek() < '0' || peek() > '9') {
      fail(std::string("expected ") + what);
    }
    long v = 0;
    while (!eof() && peek() >= '0' && peek() <= '9') {
      v = v * 10 + (peek() - '0');
      if (v > 1'000'000'000) fail(std::string(what) + " out of range");
      ++off;
    }
    return static_cast<int>(v);
  }
};

// --- FAST ------------------------------------------------------------------

// Radius-3 Bresenham circle, clockwise from the top.
constexpr int kCircleDx[16] = {0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3, -3, -3, -2, -1};
constexpr int kCircleDy[16] = {-3, -3, -2, -1, 0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3};

// Score of the segment test at one pixel; 0 when it is not a corner.
double fast_score(const GrayImage& img, int x, int y, int threshold) {
  const int c = img.at(x, y);
  int ring[16];
  for (int i = 0; i < 16; ++i) ring[i] = img.at(x + kCircleDx[i], y + kCircleDy[i]);

  const int hi = c + threshold;
  const int lo = c - threshold;
  double best = 0.0;
  for (int start = 0; start < 16; ++start) {
    int min_bright = 256, min_dark = 256;
    for (int k = 0; k < 9; ++k) {
      const int v = ring[(start + k) & 15];
      min_bright = std::min(min_bright, v - c);
      min_dark = std::min(min_dark, c - v);
      if (v <= hi && v >= lo) {  // neither side can succeed from here
        min_bright = -1;
        min_dark = -1;
        break;
      }
    }
    // A mixed arc fails both sides: min_bright > threshold requires every
    // pixel bright, min_dark > threshold every pixel dark.
    if (min_bright > threshold) best = std::max(best, static_cast<double>(min_bright));
    if (min_dark > threshold) best = std::max(best, static_cast<double>(min_dark));
  }
  return best;
}

// --- geometry --------------------------------------------------------------

void bilinear_rotate_crop(const GrayImage& window, double angle_rad,
                          int crop_dx, int crop_dy, double* out /*32x32*/) {
  const int w = window.width, h = window.height;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const int ox = (w - kPatchSize) / 2 + crop_dx;
  const int oy = (h - kPatchSize) / 2 + crop_dy;
  const double cos_t = std::cos(angle_rad), sin_t = std::sin(angle_rad);
  for (int i = 0; i < kPatchSize; ++i) {
    for (int j = 0; j < kPatchSize; ++j) {
      const double dx = ox + j - cx;
      const double dy = oy + i - cy;
      const double sx = cx + cos_t * dx + sin_t * dy;
      const double sy = cy - sin_t * dx + cos_t * dy;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      assert(x0 >= 0 && y0 >= 0 && x0 + 1 < w && y0 + 1 < h);
      const double fx = sx - x0, fy = sy - y0;
      const double v00 = window.at(x0, y0), v10 = window.at(x0 + 1, y0);
      const double v01 = window.at(x0, y0 + 1), v11 = window.at(x0 + 1, y0 + 1);
      out[i * kPatchSize + j] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) +
                                fy * ((1.0 - fx) * v01 + fx * v11);
    }
  }
}

uint8_t to_byte(double v) {
  const long r = std::lround(v);
  return static_cast<uint8_t>(std::clamp(r, 0L, 255L));
}

GrayImage window_around(const GrayImage& image, int x, int y, int size) {
  GrayImage win(size, size);
  const int x0 = x - size / 2, y0 = y - size / 2;
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) win.at(j, i) = image.at(x0 + j, y0 + i);
  }
  return win;
}

bool window_inside(const GrayImage& image, int x, int y, int size) {
  const int x0 = x - size / 2, y0 = y - size / 2;
  return x0 >= 0 && y0 >= 0 && x0 + size <= image.width && y0 + size <= image.height;
}

}  // namespace

GrayImage load_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  PgmCursor cur{bytes, 0, path.string()};
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    cur.fail("wrong magic, expected \"P5\"");
  }
  cur.off = 2;
  const int width = cur.read_number("width");
  const int height = cur.read_number("height");
  const int maxval = cur.read_number("maxval");
  if (width <= 0 || height <= 0) cur.fail("non-positive dimensions");
  if (maxval <= 0 || maxval > 255) cur.fail("maxval must be in 1..255");
  if (cur.eof()) cur.fail("missing whitespace before pixel data");
  const char sep = cur.peek();
  if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
    cur.fail("missing whitespace before pixel data");
  }
  ++cur.off;
  const size_t need = static_cast<size_t>(width) * height;
  if (bytes.size() - cur.off < need) cur.fail("truncated pixel data");
  GrayImage img(width, height);
  std::memcpy(img.pixels.data(), bytes.data() + cur.off, need);
  return img;
}

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
  std::string out = "P5\n" + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  write_file_atomic(path, out);
}

std::vector<Keypoint> fast_detect(const GrayImage& image, int threshold,
                                  bool use_nms) {
  if (image.width < 7 || image.height < 7) return {};
  if (threshold < 1) throw ConstraintError("fast_detect: threshold must be >= 1");

  std::vector<double> scores(static_cast<size_t>(image.width) * image.height, 0.0);
  std::vector<Keypoint> raw;
  for (int y = 3; y < image.height - 3; ++y) {
    for (int x = 3; x < image.width - 3; ++x) {
      const double s = fast_score(image, x, y, threshold);
      if (s > 0.0) {
        scores[static_cast<size_t>(y) * image.width + x] = s;
        raw.push_back({x, y, s});
      }
    }
  }
  if (!use_nms) return raw;

  std::vector<Keypoint> kept;
  for (const Keypoint& kp : raw) {
    bool is_max = true;
    for (int dy = -1; dy <= 1 && is_max; ++dy) {
      for (int dx = -1; dx <= 1 && is_max; ++dx) {
        if (dx == 0 && dy == 0) continue;
        const int nx = kp.x + dx, ny = kp.y + dy;
        if (nx < 0 || ny < 0 || nx >= image.width || ny >= image.height) continue;
        const double ns = scores[static_cast<size_t>(ny) * image.width + nx];
        if (ns > kp.score) {
          is_max = false;
        } else if (ns == kp.score && ns > 0.0) {
          // tie: the earliest corner in row-major order survives
          if (ny < kp.y || (ny == kp.y && nx < kp.x)) is_max = false;
        }
      }
    }
    if (is_max) kept.push_back(kp);
  }
  return kept;
}

std::vector<Keypoint> grid_distribute(const std::vector<Keypoint>& keypoints,
                                      int width, int height, int grid_cols,
                                      int grid_rows, int per_cell) {
  if (grid_cols < 1 || grid_rows < 1 || per_cell < 1) {
    throw ConstraintError("grid_distribute: grid dims and per_cell must be >= 1");
  }
  std::vector<std::vector<Keypoint>> cells(static_cast<size_t>(grid_cols) * grid_rows);
  for (const Keypoint& kp : keypoints) {
    const int cx = std::min(static_cast<int>(static_cast<int64_t>(kp.x) * grid_cols / width),
                            grid_cols - 1);
    const int cy = std::min(static_cast<int>(static_cast<int64_t>(kp.y) * grid_rows / height),
                            grid_rows - 1);
    cells[static_cast<size_t>(cy) * grid_cols + cx].push_back(kp);
  }
  std::vector<Keypoint> out;
  for (std::vector<Keypoint>& cell : cells) {
    std::sort(cell.begin(), cell.end(), [](const Keypoint& a, const Keypoint& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.y != b.y) return a.y < b.y;
      return a.x < b.x;
    });
    const size_t keep = std::min(cell.size(), static_cast<size_t>(per_cell));
    out.insert(out.end(), cell.begin(), cell.begin() + keep);
  }
  return out;
}

void write_keypoints(const std::vector<Keypoint>& keypoints,
                     const std::filesystem::path& path) {
  std::string out;
  for (const Keypoint& kp : keypoints) {
    out += std::to_string(kp.x) + " " + std::to_string(kp.y) + " ";
    std::ostringstream s;
    s << kp.score;
    out += s.str() + "\n";
  }
  write_file_atomic(path, out);
}

std::vector<Keypoint> read_keypoints(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<Keypoint> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Keypoint kp;
    if (!(ls >> kp.x >> kp.y >> kp.score)) {
      throw FormatError(path.string() + ": bad keypoint line " + std::to_string(line_no));
    }
    out.push_back(kp);
  }
  return out;
}

void normalize_pixels(std::array<double, kPatchSize * kPatchSize>& pixels) {
  double mean = 0.0;
  for (double v : pixels) mean += v;
  mean /= pixels.size();
  double var = 0.0;
  for (double v : pixels) var += (v - mean) * (v - mean);
  var /= pixels.size();
  const double stddev = std::sqrt(var);
  for (double& v : pixels) v = (v - mean) / (stddev + 1e-8);
}

Patch extract_patch(const GrayImage& image, const Keypoint& keypoint, int size,
                    bool normalize) {
  if (size != kPatchSize) {
    throw DimensionError("extract_patch: only size " + std::to_string(kPatchSize) +
                         " is supported");
  }
  if (!window_inside(image, keypoint.x, keypoint.y, size)) {
    throw BoundaryError("extract_patch: window at (" + std::to_string(keypoint.x) +
                        "," + std::to_string(keypoint.y) + ") leaves the image");
  }
  Patch p;
  p.x = keypoint.x;
  p.y = keypoint.y;
  const int x0 = keypoint.x - size / 2, y0 = keypoint.y - size / 2;
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      p.pixels[static_cast<size_t>(i) * size + j] = image.at(x0 + j, y0 + i);
    }
  }
  if (normalize) normalize_pixels(p.pixels);
  return p;
}

Patch augment(const GrayImage& source_window, Rng& rng, double max_rotation_deg) {
  if (source_window.width < 48 || source_window.height < 48) {
    throw DimensionError("augment: source window must be at least 48x48");
  }
  const double angle_deg = rng.uniform(-max_rotation_deg, max_rotation_deg);
  Patch p;
  bilinear_rotate_crop(source_window, angle_deg * std::numbers::pi / 180.0, 0, 0,
                       p.pixels.data());
  normalize_pixels(p.pixels);
  return p;
}

Patch record_to_patch(const PatchDataset::Record& record) {
  Patch p;
  for (size_t i = 0; i < record.pixels.size(); ++i) p.pixels[i] = record.pixels[i];
  normalize_pixels(p.pixels);
  return p;
}

void validate_dataset(const PatchDataset& dataset) {
  std::map<uint32_t, int> counts;
  for (const PatchDataset::Record& r : dataset.records) ++counts[r.label];
  for (const auto& [label, count] : counts) {
    if (count < 2) {
      throw ConstraintError("dataset: label " + std::to_string(label) +
                            " has only " + std::to_string(count) + " view(s)");
    }
  }
}

void write_dataset(const PatchDataset& dataset, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw("DFPD", 4);
  w.u32(kDatasetVersion);
  w.u32(kPatchSize);
  w.u32(static_cast<uint32_t>(dataset.records.size()));
  for (const PatchDataset::Record& r : dataset.records) {
    w.u32(r.label);
    w.raw(r.pixels.data(), r.pixels.size());
  }
  write_file_atomic(path, w.data());
}

PatchDataset read_dataset(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  r.expect_magic("DFPD");
  const uint32_t version = r.u32();
  if (version != kDatasetVersion) r.fail("unsupported version " + std::to_string(version));
  const uint32_t patch_size = r.u32();
  if (patch_size != kPatchSize) {
    r.fail("unsupported patch size " + std::to_string(patch_size));
  }
  const uint32_t count = r.u32();
  if (r.remaining() != static_cast<size_t>(count) * (4 + PatchDataset::kRecordPixels)) {
    r.fail("record payload size mismatch for " + std::to_string(count) + " records");
  }
  PatchDataset ds;
  ds.records.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    ds.records[i].label = r.u32();
    r.raw(ds.records[i].pixels.data(), ds.records[i].pixels.size());
  }
  r.expect_end();
  return ds;
}

PatchDataset build_dataset(const std::vector<GrayImage>& images,
                           const std::vector<std::vector<Keypoint>>& keypoints,
                           int views_per_label, Rng& rng, double max_rotation_deg) {
  if (views_per_label < 2) {
    throw ConstraintError("build_dataset: views_per_label must be >= 2");
  }
  if (images.size() != keypoints.size()) {
    throw DimensionError("build_dataset: one keypoint list per image required");
  }
  PatchDataset ds;
  uint32_t label = 0;
  for (size_t i = 0; i < images.size(); ++i) {
    for (const Keypoint& kp : keypoints[i]) {
      if (!window_inside(images[i], kp.x, kp.y, 48)) continue;  // callers skip border keypoints
      const GrayImage window = window_around(images[i], kp.x, kp.y, 48);
      for (int v = 0; v < views_per_label; ++v) {
        const double angle_deg = rng.uniform(-max_rotation_deg, max_rotation_deg);
        std::array<double, kPatchSize * kPatchSize> raw;
        bilinear_rotate_crop(window, angle_deg * std::numbers::pi / 180.0, 0, 0,
                             raw.data());
        PatchDataset::Record rec;
        rec.label = label;
        for (size_t k = 0; k < raw.size(); ++k) rec.pixels[k] = to_byte(raw[k]);
        ds.records.push_back(rec);
      }
      ++label;
    }
  }
  if (ds.records.empty()) {
    throw ConstraintError("build_dataset: no keypoint had a full 48x48 support window");
  }
  return ds;
}

GrayImage synthesize_image(Rng& rng, const SynthConfig& config) {
  const int n = config.image_size;
  std::vector<double> field(static_cast<size_t>(n) * n);
  for (double& v : field) v = rng.uniform();

  // Box blur passes smooth the noise into blobs; posterization then cuts
  // sharp region boundaries that FAST responds to.
  std::vector<double> tmp(field.size());
  for (int pass = 0; pass < config.blur_passes; ++pass) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -2; dy <= 2; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= n) continue;
          for (int dx = -2; dx <= 2; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= n) continue;
            acc += field[static_cast<size_t>(yy) * n + xx];
            ++cnt;
          }
        }
        tmp[static_cast<size_t>(y) * n + x] = acc / cnt;
      }
    }
    std::swap(field, tmp);
  }

  double lo = field[0], hi = field[0];
  for (double v : field) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = std::max(hi - lo, 1e-12);

  GrayImage img(n, n);
  const int levels = std::max(config.texture_levels, 2);
  for (size_t i = 0; i < field.size(); ++i) {
    const double u = (field[i] - lo) / span;  // [0,1]
    int q = static_cast<int>(u * levels);
    q = std::min(q, levels - 1);
    img.pixels[i] = to_byte(255.0 * (q + 0.5) / levels);
  }
  return img;
}

PatchDataset synthesize_dataset(int label_count, int views_per_label, Rng& rng,
                                const SynthConfig& config) {
  if (label_count < 1) throw ConstraintError("synthesize_dataset: label_count must be >= 1");
  if (views_per_label < 2) {
    throw ConstraintError("synthesize_dataset: views_per_label must be >= 2");
  }
  constexpr int kWindow = 56;  // leaves room for rotation plus crop jitter

  PatchDataset ds;
  uint32_t label = 0;
  int dry_images = 0;
  while (static_cast<int>(label) < label_count) {
    const GrayImage img = synthesize_image(rng, config);
    std::vector<Keypoint> kps = fast_detect(img, config.fast_threshold, true);
    kps = grid_distribute(kps, img.width, img.height, config.grid_cols,
                          config.grid_rows, config.per_cell);
    int used = 0;
    for (const Keypoint& kp : kps) {
      if (static_cast<int>(label) >= label_count) break;
      if (!window_inside(img, kp.x, kp.y, kWindow)) continue;
      const GrayImage window = window_around(img, kp.x, kp.y, kWindow);
      for (int v = 0; v < views_per_label; ++v) {
        const double angle_deg =
            rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
        const int jitter = config.max_translate_px;
        const int dx = jitter > 0 ? static_cast<int>(rng.uniform_int(2 * jitter + 1)) - jitter : 0;
        const int dy = jitter > 0 ? static_cast<int>(rng.uniform_int(2 * jitter + 1)) - jitter : 0;
        std::array<double, kPatchSize * kPatchSize> raw;
        bilinear_rotate_crop(window, angle_deg * std::numbers::pi / 180.0, dx, dy,
                             raw.data());
        const double gain = rng.uniform(config.min_gain, config.max_gain);
        const double bias = rng.uniform(-config.max_bias, config.max_bias);
        const double sigma = rng.uniform(0.0, config.max_noise_sigma);
        PatchDataset::Record rec;
        rec.label = label;
        for (size_t k = 0; k < raw.size(); ++k) {
          const double v2 = gain * (raw[k] - 128.0) + 128.0 + bias + sigma * rng.normal();
          rec.pixels[k] = to_byte(v2);
        }
        ds.records.push_back(rec);
      }
      ++label;
      ++used;
    }
    dry_images = used == 0 ? dry_images + 1 : 0;
    if (dry_images >= 32) {
      throw ConstraintError("synthesize_dataset: generator produced no usable keypoints");
    }
  }
  return ds;
}

TripletBatch sample_batch(const PatchDataset& dataset, int batch_size, Rng& rng) {
  if (batch_size < 2) {
    throw DegenerateError("sample_batch: batch size must be >= 2");
  }
  std::map<uint32_t, std::vector<size_t>> by_label;
  for (size_t i = 0; i < dataset.records.size(); ++i) {
    by_label[dataset.records[i].label].push_back(i);
  }
  if (by_label.size() < static_cast<size_t>(batch_size)) {
    throw DegenerateError("sample_batch: dataset has " + std::to_string(by_label.size()) +
                          " labels, need " + std::to_string(batch_size));
  }
  std::vector<uint32_t> labels;
  labels.reserve(by_label.size());
  for (const auto& [label, idx] : by_label) labels.push_back(label);

  // Partial Fisher-Yates: the first batch_size entries are a uniform draw
  // without replacement.
  for (int i = 0; i < batch_size; ++i) {
    const size_t j = i + rng.uniform_int(labels.size() - i);
    std::swap(labels[i], labels[j]);
  }

  TripletBatch batch;
  for (int i = 0; i < batch_size; ++i) {
    const std::vector<size_t>& views = by_label[labels[i]];
    if (views.size() < 2) {
      throw ConstraintError("sample_batch: label " + std::to_string(labels[i]) +
                            " has fewer than 2 views");
    }
    const size_t a = rng.uniform_int(views.size());
    size_t p = rng.uniform_int(views.size() - 1);
    if (p >= a) ++p;
    batch.anchors.push_back(record_to_patch(dataset.records[views[a]]));
    batch.positives.push_back(record_to_patch(dataset.records[views[p]]));
    batch.labels.push_back(labels[i]);
  }
  return batch;
}

}  // namespace dfeat
