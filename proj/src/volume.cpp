#include "brainmt/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "brainmt/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "volume format is little-endian; big-endian hosts unsupported");

namespace brainmt {

Volume4D::Volume4D(int T_, int H_, int W_, int D_, bool with_mask)
    : T(T_), H(H_), W(W_), D(D_) {
  validate();
  data.assign(size(), 0.0);
  if (with_mask) mask.assign(spatial(), 1);
}

int64_t Volume4D::foreground_count() const {
  int64_t n = 0;
  for (uint8_t m : mask) n += m ? 1 : 0;
  return n;
}

void Volume4D::validate() const {
  if (T < 1) throw DimError("volume: T must be >= 1, got " + std::to_string(T));
  if (H < 16 || W < 16 || D < 16 || H % 16 || W % 16 || D % 16)
    throw DimError("volume: spatial dims must be divisible by 16, got " +
                   std::to_string(H) + "x" + std::to_string(W) + "x" + std::to_string(D));
  if (!data.empty() && static_cast<int64_t>(data.size()) != size())
    throw DimError("volume: payload size mismatch");
  if (!mask.empty()) {
    if (static_cast<int64_t>(mask.size()) != spatial())
      throw DimError("volume: mask size mismatch");
    if (foreground_count() < 1) throw DimError("volume: mask has no foreground voxels");
  }
}

FrameSampling frame_sampling_from_string(const std::string& s) {
  if (s == "window") return FrameSampling::window;
  if (s == "subset") return FrameSampling::subset;
  throw ConfigError("unknown frame-sampling mode: " + s);
}

std::string to_string(FrameSampling m) {
  return m == FrameSampling::window ? "window" : "subset";
}

// ---------------------------------------------------------------------------
// Planted-signal geometry

namespace {

std::vector<int64_t> ball_voxels(int H, int W, int D, int ch, int cw, int cd, int radius) {
  std::vector<int64_t> out;
  for (int h = std::max(0, ch - radius); h <= std::min(H - 1, ch + radius); ++h)
    for (int w = std::max(0, cw - radius); w <= std::min(W - 1, cw + radius); ++w)
      for (int d = std::max(0, cd - radius); d <= std::min(D - 1, cd + radius); ++d) {
        int dh = h - ch, dw = w - cw, dd = d - cd;
        if (dh * dh + dw * dw + dd * dd <= radius * radius)
          out.push_back((static_cast<int64_t>(h) * W + w) * D + d);
      }
  return out;
}

constexpr int kRoiRadius = 4;

}  // namespace

// The ROIs sit at the centers of the first and last 16^3 encoder cells so
// each maps cleanly onto one stage-2 token; the sex blob takes a third,
// disjoint cell.
std::vector<int64_t> roi_voxels_a(int H, int W, int D) {
  return ball_voxels(H, W, D, 8, 8, 8, kRoiRadius);
}
std::vector<int64_t> roi_voxels_b(int H, int W, int D) {
  return ball_voxels(H, W, D, H - 8, W - 8, D - 8, kRoiRadius);
}
std::vector<int64_t> roi_voxels_sex(int H, int W, int D) {
  return ball_voxels(H, W, D, H - 8, 8, 8, kRoiRadius);
}

std::vector<double> roi_mean_course(const Volume4D& v, const std::vector<int64_t>& voxels) {
  std::vector<double> course(v.T, 0.0);
  int64_t sp = v.spatial();
  for (int t = 0; t < v.T; ++t) {
    double acc = 0.0;
    const double* frame = v.data.data() + static_cast<int64_t>(t) * sp;
    for (int64_t p : voxels) acc += frame[p];
    course[t] = acc / static_cast<double>(voxels.size());
  }
  return course;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw DimError("pearson: length mismatch or empty input");
  double n = static_cast<double>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  double denom = std::sqrt(saa * sbb);
  if (denom == 0.0) return 0.0;
  return sab / denom;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

namespace {

// Stationary AR(1): x_t = phi x_{t-1} + sqrt(1-phi^2) e_t, unit marginal var.
std::vector<double> ar1_course(Rng& rng, int T, double phi) {
  std::vector<double> x(T);
  double w = std::sqrt(1.0 - phi * phi);
  x[0] = rng.normal();
  for (int t = 1; t < T; ++t) x[t] = phi * x[t - 1] + w * rng.normal();
  return x;
}

}  // namespace

std::vector<Subject> generate_synthetic_dataset(const SyntheticConfig& cfg) {
  if (cfg.n_subjects < 1) throw ConfigError("generate: n_subjects must be >= 1");
  if (cfg.T_total < 2) throw ConfigError("generate: T_total must be >= 2");
  if (cfg.H % 16 || cfg.W % 16 || cfg.D % 16 || cfg.H < 16 || cfg.W < 16 || cfg.D < 16)
    throw ConfigError("generate: dims must be divisible by 16, got " +
                      std::to_string(cfg.H) + "x" + std::to_string(cfg.W) + "x" +
                      std::to_string(cfg.D));

  auto roi_a = roi_voxels_a(cfg.H, cfg.W, cfg.D);
  auto roi_b = roi_voxels_b(cfg.H, cfg.W, cfg.D);
  auto roi_s = roi_voxels_sex(cfg.H, cfg.W, cfg.D);

  // Balanced sex labels (within one), shuffled deterministically.
  std::vector<int> sexes(cfg.n_subjects);
  for (int i = 0; i < cfg.n_subjects; ++i) sexes[i] = i % 2;
  Rng label_rng(Rng::mix(cfg.seed, 0xba1a5ceULL));
  for (int i = cfg.n_subjects - 1; i > 0; --i)
    std::swap(sexes[i], sexes[label_rng.uniform_int(0, i)]);

  std::vector<Subject> subjects(cfg.n_subjects);
  int64_t sp = static_cast<int64_t>(cfg.H) * cfg.W * cfg.D;

  for (int i = 0; i < cfg.n_subjects; ++i) {
    Subject& s = subjects[i];
    char buf[16];
    std::snprintf(buf, sizeof(buf), "sub_%04d", i);
    s.id = buf;
    s.sex_label = sexes[i];
    s.volume = Volume4D(cfg.T_total, cfg.H, cfg.W, cfg.D, /*with_mask=*/true);

    Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(i)));

    // Planted correlation strength; the stored target is re-measured from
    // the emitted data below.
    double rho = rng.uniform(-0.9, 0.9);
    auto e1 = ar1_course(rng, cfg.T_total, cfg.ar_coeff);
    auto e2 = ar1_course(rng, cfg.T_total, cfg.ar_coeff);
    std::vector<double> course_b(cfg.T_total);
    double wmix = std::sqrt(1.0 - rho * rho);
    for (int t = 0; t < cfg.T_total; ++t) course_b[t] = rho * e1[t] + wmix * e2[t];

    // Ellipsoidal foreground mask.
    double rh = cfg.H / 2.0 - 1.0, rw = cfg.W / 2.0 - 1.0, rd = cfg.D / 2.0 - 1.0;
    double chh = (cfg.H - 1) / 2.0, cww = (cfg.W - 1) / 2.0, cdd = (cfg.D - 1) / 2.0;
    for (int h = 0; h < cfg.H; ++h)
      for (int w = 0; w < cfg.W; ++w)
        for (int d = 0; d < cfg.D; ++d) {
          double q = (h - chh) * (h - chh) / (rh * rh) + (w - cww) * (w - cww) / (rw * rw) +
                     (d - cdd) * (d - cdd) / (rd * rd);
          s.volume.mask[(static_cast<int64_t>(h) * cfg.W + w) * cfg.D + d] = q <= 1.0 ? 1 : 0;
        }
    // Planted voxels are always foreground.
    for (int64_t p : roi_a) s.volume.mask[p] = 1;
    for (int64_t p : roi_b) s.volume.mask[p] = 1;
    for (int64_t p : roi_s) s.volume.mask[p] = 1;

    // Temporally smoothed Gaussian noise, one AR(1) chain per voxel.
    std::vector<double> prev(sp, 0.0);
    double w_ar = std::sqrt(1.0 - cfg.ar_coeff * cfg.ar_coeff);
    for (int t = 0; t < cfg.T_total; ++t) {
      double* frame = s.volume.data.data() + static_cast<int64_t>(t) * sp;
      for (int64_t p = 0; p < sp; ++p) {
        double e = rng.normal();
        double v = t == 0 ? e : cfg.ar_coeff * prev[p] + w_ar * e;
        prev[p] = v;
        frame[p] = cfg.noise_sigma * v;
      }
      double amp_a = cfg.roi_amplitude * e1[t];
      double amp_b = cfg.roi_amplitude * course_b[t];
      double amp_s = cfg.sex_amplitude * (s.sex_label == 1 ? 1.0 : -1.0);
      for (int64_t p : roi_a) frame[p] += amp_a;
      for (int64_t p : roi_b) frame[p] += amp_b;
      for (int64_t p : roi_s) frame[p] += amp_s;
    }

    s.raw_roi_correlation =
        pearson(roi_mean_course(s.volume, roi_a), roi_mean_course(s.volume, roi_b));
  }

  // Z-score the measured correlations into the regression targets.
  double mu = 0.0;
  for (auto& s : subjects) mu += s.raw_roi_correlation;
  mu /= subjects.size();
  double var = 0.0;
  for (auto& s : subjects) {
    double d = s.raw_roi_correlation - mu;
    var += d * d;
  }
  var /= subjects.size();
  double sd = std::sqrt(var);
  for (auto& s : subjects)
    s.cognition_score = sd > 0.0 ? (s.raw_roi_correlation - mu) / sd : 0.0;
  return subjects;
}

// ---------------------------------------------------------------------------
// Normalization and frame sampling

Volume4D zscore_normalize(const Volume4D& v) {
  if (!v.has_mask()) throw ConfigError("zscore_normalize: volume has no foreground mask");
  v.validate();
  int64_t sp = v.spatial();
  double sum = 0.0, sum2 = 0.0;
  int64_t n = 0;
  for (int t = 0; t < v.T; ++t) {
    const double* frame = v.data.data() + static_cast<int64_t>(t) * sp;
    for (int64_t p = 0; p < sp; ++p)
      if (v.mask[p]) {
        sum += frame[p];
        sum2 += frame[p] * frame[p];
        ++n;
      }
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  if (var <= 0.0) throw NumericError("zscore_normalize: zero foreground variance");
  double inv_sd = 1.0 / std::sqrt(var);

  Volume4D out = v;
  double min_fg = 0.0;
  bool first = true;
  for (int t = 0; t < v.T; ++t) {
    double* frame = out.data.data() + static_cast<int64_t>(t) * sp;
    for (int64_t p = 0; p < sp; ++p)
      if (v.mask[p]) {
        frame[p] = (frame[p] - mean) * inv_sd;
        if (first || frame[p] < min_fg) {
          min_fg = frame[p];
          first = false;
        }
      }
  }
  for (int t = 0; t < v.T; ++t) {
    double* frame = out.data.data() + static_cast<int64_t>(t) * sp;
    for (int64_t p = 0; p < sp; ++p)
      if (!v.mask[p]) frame[p] = min_fg;
  }
  return out;
}

Volume4D sample_frames(const Volume4D& v, int T, uint64_t seed, FrameSampling mode) {
  if (T < 1 || T > v.T)
    throw DimError("sample_frames: requested " + std::to_string(T) + " of " +
                   std::to_string(v.T) + " frames");
  Rng rng(seed);
  Volume4D out;
  out.T = T;
  out.H = v.H;
  out.W = v.W;
  out.D = v.D;
  out.mask = v.mask;
  int64_t sp = v.spatial();
  out.data.resize(static_cast<int64_t>(T) * sp);
  if (mode == FrameSampling::window) {
    int64_t off = rng.uniform_int(0, v.T - T);
    out.tr_index_origin = static_cast<uint32_t>(off);
    std::memcpy(out.data.data(), v.data.data() + off * sp,
                static_cast<size_t>(T) * sp * sizeof(double));
  } else {
    // Sorted sample without replacement (partial Fisher-Yates).
    std::vector<int> idx(v.T);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < T; ++i)
      std::swap(idx[i], idx[rng.uniform_int(i, v.T - 1)]);
    idx.resize(T);
    std::sort(idx.begin(), idx.end());
    out.tr_index_origin = static_cast<uint32_t>(idx[0]);
    for (int t = 0; t < T; ++t)
      std::memcpy(out.data.data() + static_cast<int64_t>(t) * sp,
                  v.data.data() + static_cast<int64_t>(idx[t]) * sp, sp * sizeof(double));
  }
  return out;
}

Volume4D shuffle_frames(const Volume4D& v, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> perm(v.T);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = v.T - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  Volume4D out = v;
  int64_t sp = v.spatial();
  for (int t = 0; t < v.T; ++t)
    std::memcpy(out.data.data() + static_cast<int64_t>(t) * sp,
                v.data.data() + static_cast<int64_t>(perm[t]) * sp, sp * sizeof(double));
  return out;
}

// ---------------------------------------------------------------------------
// Binary volume format

namespace {

constexpr char kMagic[8] = {'B', 'M', 'T', '4', 'V', 'O', 'L', '1'};

void put_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t get_u32(std::ifstream& f, const std::string& path) {
  uint32_t v = 0;
  if (!f.read(reinterpret_cast<char*>(&v), 4))
    throw IoError(path + ": truncated header");
  return v;
}

}  // namespace

void save_volume(const Volume4D& v, const std::string& path) {
  v.validate();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kMagic, 8);
  put_u32(f, static_cast<uint32_t>(v.T));
  put_u32(f, static_cast<uint32_t>(v.H));
  put_u32(f, static_cast<uint32_t>(v.W));
  put_u32(f, static_cast<uint32_t>(v.D));
  put_u32(f, v.has_mask() ? 1u : 0u);
  put_u32(f, v.tr_index_origin);
  f.write(reinterpret_cast<const char*>(v.data.data()), v.data.size() * sizeof(double));
  if (v.has_mask())
    f.write(reinterpret_cast<const char*>(v.mask.data()), v.mask.size());
  if (!f) throw IoError("write failed: " + path);
}

Volume4D load_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[8] = {};
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError(path + ": bad magic (not a BMT4VOL1 volume)");
  Volume4D v;
  v.T = static_cast<int>(get_u32(f, path));
  v.H = static_cast<int>(get_u32(f, path));
  v.W = static_cast<int>(get_u32(f, path));
  v.D = static_cast<int>(get_u32(f, path));
  uint32_t flags = get_u32(f, path);
  v.tr_index_origin = get_u32(f, path);
  if (v.T < 1 || v.H < 1 || v.W < 1 || v.D < 1)
    throw IoError(path + ": invalid dimensions in header");
  v.data.resize(v.size());
  f.read(reinterpret_cast<char*>(v.data.data()), v.data.size() * sizeof(double));
  if (f.gcount() != static_cast<std::streamsize>(v.data.size() * sizeof(double)))
    throw IoError(path + ": truncated payload (header declares " +
                  std::to_string(v.size()) + " values)");
  if (flags & 1u) {
    v.mask.resize(v.spatial());
    f.read(reinterpret_cast<char*>(v.mask.data()), v.mask.size());
    if (f.gcount() != static_cast<std::streamsize>(v.mask.size()))
      throw IoError(path + ": truncated mask");
  }
  v.validate();
  return v;
}

void save_sidecar(const std::string& volume_path, const Subject& s) {
  nlohmann::json j{{"id", s.id}, {"sex", s.sex_label}, {"cognition", s.cognition_score}};
  std::ofstream f(volume_path + ".json", std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + volume_path + ".json");
  f << j.dump(2) << "\n";
}

void load_sidecar(const std::string& volume_path, Subject& s) {
  std::ifstream f(volume_path + ".json");
  if (!f) throw IoError("cannot open: " + volume_path + ".json");
  nlohmann::json j;
  try {
    f >> j;
    s.id = j.at("id").get<std::string>();
    s.sex_label = j.at("sex").get<int>();
    s.cognition_score = j.at("cognition").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(volume_path + ".json: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Splits and manifests

namespace {

std::vector<std::string> shuffled_ids(const std::vector<std::string>& ids, uint64_t seed) {
  std::vector<std::string> out = ids;
  Rng rng(Rng::mix(seed, 0x511f7));
  for (size_t i = out.size(); i > 1; --i)
    std::swap(out[i - 1], out[rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
  return out;
}

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

}  // namespace

DatasetSplit make_splits(const std::vector<std::string>& ids, uint64_t seed) {
  if (ids.size() < 3) throw ConfigError("make_splits: need at least 3 subjects");
  auto order = shuffled_ids(ids, seed);
  int n = static_cast<int>(order.size());
  int n_train = round_half_up(0.70 * n);
  int n_val = round_half_up(0.15 * n);
  n_train = std::min(n_train, n - 2);
  n_val = std::max(1, std::min(n_val, n - n_train - 1));
  DatasetSplit s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  return s;
}

std::vector<DatasetSplit> make_cv_folds(const std::vector<std::string>& ids, int folds,
                                        uint64_t seed) {
  if (folds < 2) throw ConfigError("make_cv_folds: need folds >= 2");
  if (static_cast<int>(ids.size()) < folds * 2)
    throw ConfigError("make_cv_folds: too few subjects for " + std::to_string(folds) +
                      " folds");
  auto order = shuffled_ids(ids, seed);
  int n = static_cast<int>(order.size());
  std::vector<DatasetSplit> out(folds);
  for (int f = 0; f < folds; ++f) {
    DatasetSplit& s = out[f];
    s.fold_index = f;
    std::vector<std::string> rest;
    for (int i = 0; i < n; ++i) {
      if (i % folds == f)
        s.test.push_back(order[i]);
      else
        rest.push_back(order[i]);
    }
    int n_val = std::max(1, round_half_up(0.15 * n));
    n_val = std::min(n_val, static_cast<int>(rest.size()) - 1);
    s.val.assign(rest.begin(), rest.begin() + n_val);
    s.train.assign(rest.begin() + n_val, rest.end());
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "id,path,split,fold\n";
  for (const auto& r : rows)
    f << r.id << "," << r.path << "," << r.split << "," << r.fold << "\n";
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "id,path,split,fold")
    throw IoError(path + ": not a dataset manifest (bad header)");
  std::vector<ManifestRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    ManifestRow r;
    size_t p0 = line.find(',');
    size_t p1 = line.find(',', p0 + 1);
    size_t p2 = line.find(',', p1 + 1);
    if (p0 == std::string::npos || p1 == std::string::npos || p2 == std::string::npos)
      throw IoError(path + ": malformed manifest row: " + line);
    r.id = line.substr(0, p0);
    r.path = line.substr(p0 + 1, p1 - p0 - 1);
    r.split = line.substr(p1 + 1, p2 - p1 - 1);
    r.fold = std::stoi(line.substr(p2 + 1));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace brainmt
