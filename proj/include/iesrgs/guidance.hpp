#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iesrgs/io.hpp"
#include "iesrgs/losses.hpp"
#include "iesrgs/render.hpp"
#include "iesrgs/rng.hpp"

namespace iesrgs {

// ---------------------------------------------------------------- Resampling

/// Catmull-Rom cubic (a = -0.5).
inline double catmull_rom(double t) {
  t = std::abs(t);
  if (t < 1) return 1.5 * t * t * t - 2.5 * t * t + 1;
  if (t < 2) return -0.5 * t * t * t + 2.5 * t * t - 4 * t + 2;
  return 0;
}

namespace detail {

/// One output sample of a 1D resampling: source taps and normalized weights.
struct Taps {
  std::vector<int> index;
  std::vector<double> weight;
  int anchor{0};  // position of the largest weight
};

/// sum_k w_k v_k evaluated as v_a + sum_k w_k (v_k - v_a): identical in exact
/// arithmetic (weights sum to one) and reproduces constant signals exactly.
template <typename Get>
double apply_taps(const Taps& t, Get get) {
  const double ref = get(t.index[t.anchor]);
  double s = 0;
  for (std::size_t k = 0; k < t.index.size(); ++k) s += t.weight[k] * (get(t.index[k]) - ref);
  return ref + s;
}

/// Filter taps mapping `src_n` samples to `dst_n` samples with pixel-center
/// alignment. `support_scale` > 1 stretches the kernel for area-correct
/// minification; indices are clamped to the edge.
inline std::vector<Taps> resample_taps(int src_n, int dst_n, double support_scale) {
  const double ratio = static_cast<double>(src_n) / dst_n;
  std::vector<Taps> out(dst_n);
  for (int i = 0; i < dst_n; ++i) {
    const double center = (i + 0.5) * ratio - 0.5;
    const int lo = static_cast<int>(std::floor(center - 2 * support_scale)) + 1;
    const int hi = static_cast<int>(std::ceil(center + 2 * support_scale)) - 1;
    double sum = 0;
    for (int j = lo; j <= hi; ++j) {
      const double w = catmull_rom((j - center) / support_scale);
      if (w == 0) continue;
      out[i].index.push_back(std::clamp(j, 0, src_n - 1));
      out[i].weight.push_back(w);
      sum += w;
    }
    for (auto& w : out[i].weight) w /= sum;
    out[i].anchor = static_cast<int>(std::max_element(out[i].weight.begin(), out[i].weight.end()) -
                                     out[i].weight.begin());
  }
  return out;
}

inline ImageBuffer separable_resample(const ImageBuffer& src, int dst_w, int dst_h, double support_scale) {
  const auto tx = resample_taps(src.width, dst_w, support_scale);
  const auto ty = resample_taps(src.height, dst_h, support_scale);
  ImageBuffer tmp(dst_w, src.height, src.channels), out(dst_w, dst_h, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < dst_w; ++x)
      for (int c = 0; c < src.channels; ++c)
        tmp.at(x, y, c) = apply_taps(tx[x], [&](int i) { return src.at(i, y, c); });
  for (int y = 0; y < dst_h; ++y)
    for (int x = 0; x < dst_w; ++x)
      for (int c = 0; c < src.channels; ++c)
        out.at(x, y, c) = apply_taps(ty[y], [&](int j) { return tmp.at(x, j, c); });
  return out;
}

}  // namespace detail

/// Catmull-Rom upsampling by an integer factor, channel-independent, edge-clamped.
inline ImageBuffer bicubic_upsample(const ImageBuffer& lr, int factor) {
  IESRGS_EXPECTS(factor >= 1, "upsampling factor must be >= 1");
  return detail::separable_resample(lr, lr.width * factor, lr.height * factor, 1.0);
}

/// External guidance stand-in when no 2DSR output is available.
inline ImageBuffer bicubic_fallback(const ImageBuffer& lr, int factor) {
  IESRGS_EXPECTS(factor >= 2, "bicubic fallback factor must be >= 2");
  return bicubic_upsample(lr, factor);
}

/// Catmull-Rom downsampling with the kernel stretched by the factor
/// (area-correct prefilter), as used to build LR training views.
inline ImageBuffer bicubic_downsample(const ImageBuffer& hr, int factor) {
  IESRGS_EXPECTS(factor >= 1, "downsampling factor must be >= 1");
  IESRGS_EXPECTS(hr.width % factor == 0 && hr.height % factor == 0, "image size must be divisible by the factor");
  return detail::separable_resample(hr, hr.width / factor, hr.height / factor, factor);
}

/// Mean over each factor x factor block.
inline ImageBuffer box_downsample(const ImageBuffer& hr, int factor) {
  IESRGS_EXPECTS(factor >= 1, "downsampling factor must be >= 1");
  IESRGS_EXPECTS(hr.width % factor == 0 && hr.height % factor == 0, "image size must be divisible by the factor");
  ImageBuffer out(hr.width / factor, hr.height / factor, hr.channels);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < hr.channels; ++c) {
        double s = 0;
        for (int j = 0; j < factor; ++j)
          for (int i = 0; i < factor; ++i) s += hr.at(x * factor + i, y * factor + j, c);
        out.at(x, y, c) = s * inv;
      }
  return out;
}

// ---------------------------------------------------------------- Types

using ViewId = std::string;

struct GuidanceSet {
  ViewId view_id;
  ImageBuffer external_image;
  DepthBuffer external_depth;
  ImageBuffer internal_image;
  DepthBuffer internal_depth;

  GuidanceView view() const { return {external_image, external_depth, internal_image, internal_depth}; }
};

enum class Provenance { Ingested, BicubicFallback };

inline const char* to_string(Provenance p) { return p == Provenance::Ingested ? "ingested" : "bicubic-fallback"; }

struct ManifestEntry {
  ViewId view_id;
  std::filesystem::path image;
  std::filesystem::path depth;
};

/// Per-view external guidance files. On disk: tab-separated
/// `view_id  image_path  depth_path` lines; `# scale: N` and
/// `# provenance: ingested|bicubic-fallback` header directives; relative
/// paths resolve against the manifest's directory.
struct GuidanceManifest {
  std::vector<ManifestEntry> entries;
  int scale{4};
  Provenance provenance{Provenance::Ingested};
};

/// Raised when guidance cannot be used; holds one line per offending view.
class GuidanceError : public std::runtime_error {
 public:
  explicit GuidanceError(std::vector<std::string> diagnostics)
      : std::runtime_error(join(diagnostics)), diagnostics_(std::move(diagnostics)) {}
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  static std::string join(const std::vector<std::string>& d) {
    std::string s = "invalid guidance:";
    for (const auto& line : d) s += "\n  " + line;
    return s;
  }
  std::vector<std::string> diagnostics_;
};

inline void write_manifest(const std::filesystem::path& path, const GuidanceManifest& m) {
  detail::ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "# scale: " << m.scale << "\n# provenance: " << to_string(m.provenance) << '\n';
  for (const auto& e : m.entries) os << e.view_id << '\t' << e.image.string() << '\t' << e.depth.string() << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline GuidanceManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  GuidanceManifest m;
  const auto base = path.parent_path();
  std::string line;
  int lineno = 0;
  auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string key, value;
      ss >> key >> value;
      if (key == "scale:") {
        try {
          m.scale = std::stoi(value);
        } catch (const std::logic_error&) {
          throw IoError(where() + "bad scale '" + value + "'");
        }
      } else if (key == "provenance:") {
        if (value == "ingested") m.provenance = Provenance::Ingested;
        else if (value == "bicubic-fallback") m.provenance = Provenance::BicubicFallback;
        else throw IoError(where() + "unknown provenance '" + value + "'");
      }
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      fields.push_back(line.substr(start, tab - start));
    fields.push_back(line.substr(start));
    if (fields.size() != 3) throw IoError(where() + "expected 'view_id<TAB>image<TAB>depth'");
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path fp(p);
      return fp.is_absolute() ? fp : base / fp;
    };
    m.entries.push_back({fields[0], resolve(fields[1]), resolve(fields[2])});
  }
  return m;
}

// ---------------------------------------------------------------- External

struct ExternalGuidance {
  ImageBuffer image;
  DepthBuffer depth;
};

/// Expected LR size of one training view.
struct ViewSize {
  int width{0};
  int height{0};
};

/// Loads and validates every manifest entry. Each view must appear in
/// `lr_sizes` exactly once, and every training view must have an entry;
/// images must be HR (LR x scale) and finite. All problems are collected and
/// reported together.
inline std::map<ViewId, ExternalGuidance> ingest_external(const GuidanceManifest& manifest,
                                                          const std::map<ViewId, ViewSize>& lr_sizes) {
  std::vector<std::string> diag;
  std::map<ViewId, ExternalGuidance> out;
  for (const auto& e : manifest.entries) {
    const auto size = lr_sizes.find(e.view_id);
    if (size == lr_sizes.end()) {
      diag.push_back("view " + e.view_id + ": not a training view");
      continue;
    }
    if (out.count(e.view_id)) {
      diag.push_back("view " + e.view_id + ": duplicate manifest entry");
      continue;
    }
    const int w = size->second.width * manifest.scale, h = size->second.height * manifest.scale;
    ExternalGuidance g;
    try {
      g.image = read_image(e.image);
      if (g.image.channels == 1) {
        ImageBuffer rgb(g.image.width, g.image.height, 3);
        for (std::size_t p = 0; p < g.image.pixel_count(); ++p)
          for (int c = 0; c < 3; ++c) rgb.data[p * 3 + c] = g.image.data[p];
        g.image = std::move(rgb);
      }
    } catch (const IoError& err) {
      diag.push_back("view " + e.view_id + ": " + err.what());
      continue;
    }
    try {
      g.depth = read_fimg_depth(e.depth);
    } catch (const IoError& err) {
      diag.push_back("view " + e.view_id + ": " + err.what());
      continue;
    }
    auto dims = [](int a, int b) { return std::to_string(a) + "x" + std::to_string(b); };
    if (g.image.width != w || g.image.height != h)
      diag.push_back("view " + e.view_id + ": image " + e.image.string() + " is " + dims(g.image.width, g.image.height) +
                     ", expected " + dims(w, h));
    if (g.depth.width != w || g.depth.height != h)
      diag.push_back("view " + e.view_id + ": depth " + e.depth.string() + " is " + dims(g.depth.width, g.depth.height) +
                     ", expected " + dims(w, h));
    if (!std::all_of(g.image.data.begin(), g.image.data.end(), [](double v) { return std::isfinite(v); }))
      diag.push_back("view " + e.view_id + ": image " + e.image.string() + " has non-finite values");
    if (!std::all_of(g.depth.data.begin(), g.depth.data.end(), [](double v) { return std::isfinite(v); }))
      diag.push_back("view " + e.view_id + ": depth " + e.depth.string() + " has non-finite values");
    out.emplace(e.view_id, std::move(g));
  }
  for (const auto& [id, size] : lr_sizes)
    if (!std::any_of(manifest.entries.begin(), manifest.entries.end(), [&](const auto& e) { return e.view_id == id; }))
      diag.push_back("view " + id + ": missing from manifest");
  if (!diag.empty()) throw GuidanceError(std::move(diag));
  return out;
}

/// Smooth multiplicative-free perturbation of a depth map: a coarse grid of
/// N(0, amplitude) offsets, bicubically upsampled and added. Used as an
/// external depth stand-in when no estimator output is supplied.
inline DepthBuffer perturbed_depth(const DepthBuffer& d, double amplitude, int grid, Rng& rng) {
  IESRGS_EXPECTS(grid >= 1, "noise grid must be >= 1");
  ImageBuffer coarse(grid, grid, 1);
  for (auto& v : coarse.data) v = rng.normal(0.0, amplitude);
  const ImageBuffer noise = detail::separable_resample(coarse, d.width, d.height, 1.0);
  DepthBuffer out = d;
  for (std::size_t i = 0; i < d.size(); ++i) out.data[i] += noise.data[i] * d.coverage[i];
  return out;
}

// ---------------------------------------------------------------- Internal

namespace detail {

/// FNV-1a, used only to name cache directories.
class Fnv1a {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h_ = (h_ ^ b[i]) * 0x100000001b3ULL;
  }
  void f64(double v) { bytes(&v, sizeof v); }
  void i64(std::int64_t v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    i64(static_cast<std::int64_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

 private:
  std::uint64_t h_{0xcbf29ce484222325ULL};
};

inline void quantize_f32(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace detail

struct InternalGuidance {
  ImageBuffer image;
  DepthBuffer depth;
};

struct InternalGuidanceOptions {
  int factor{4};
  RenderSettings render;                  // `smoothing` spans the scene when set
  std::optional<std::filesystem::path> cache_root;  // e.g. out/guidance/internal
  std::ostream* log{&std::clog};
};

/// Cache key over everything that determines the SR-splatted buffers.
inline std::string internal_guidance_key(const std::vector<Gaussian3D>& scene, const std::vector<Camera>& cams,
                                         const std::vector<ViewId>& ids, const InternalGuidanceOptions& o) {
  detail::Fnv1a h;
  h.i64(o.factor);
  for (const auto& g : scene) {
    for (double v : {g.position.x, g.position.y, g.position.z, g.scale.x, g.scale.y, g.scale.z, g.rotation.w,
                     g.rotation.x, g.rotation.y, g.rotation.z, g.color.x, g.color.y, g.color.z, g.opacity})
      h.f64(v);
  }
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Camera& c = cams[i];
    h.str(ids[i]);
    for (double v : {c.focal.x, c.focal.y, c.principal_point.x, c.principal_point.y}) h.f64(v);
    h.i64(c.width);
    h.i64(c.height);
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) h.f64(c.rotation(r, k));
      h.f64(c.translation[r]);
    }
  }
  const RenderSettings& s = o.render;
  for (double v : {s.background.x, s.background.y, s.background.z, s.min_transmittance, s.cutoff_sigma,
                   s.projection.dilation, s.projection.near_plane})
    h.f64(v);
  for (double v : s.smoothing) h.f64(v);
  return h.hex();
}

/// SR-splats the frozen internal model for every view. With a cache root,
/// results live under <root>/<key>/{view}.fimg and {view}_depth.fimg and are
/// rounded to f32 on the cold path too, so cold and warm runs are
/// bit-identical; unreadable or mismatched cache files are regenerated with a
/// notice. Without a cache the exact renders are returned.
inline std::map<ViewId, InternalGuidance> build_internal_guidance(const std::vector<Gaussian3D>& scene,
                                                                  const std::vector<Camera>& cams,
                                                                  const std::vector<ViewId>& ids,
                                                                  const InternalGuidanceOptions& o) {
  IESRGS_EXPECTS(cams.size() == ids.size(), "one view id per camera");
  std::optional<std::filesystem::path> dir;
  if (o.cache_root) dir = *o.cache_root / internal_guidance_key(scene, cams, ids, o);
  std::map<ViewId, InternalGuidance> out;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Camera hr = cams[i].scaled(o.factor);
    if (dir) {
      const auto img_path = *dir / (ids[i] + ".fimg"), depth_path = *dir / (ids[i] + "_depth.fimg");
      if (std::filesystem::exists(img_path) && std::filesystem::exists(depth_path)) {
        try {
          InternalGuidance g{read_fimg_image(img_path), read_fimg_depth(depth_path)};
          if (g.image.width == hr.width && g.image.height == hr.height && g.image.channels == 3 &&
              g.depth.width == hr.width && g.depth.height == hr.height) {
            out.emplace(ids[i], std::move(g));
            continue;
          }
          if (o.log) *o.log << "notice: cached guidance for view " << ids[i] << " has wrong size; regenerating\n";
        } catch (const IoError& e) {
          if (o.log) *o.log << "notice: cached guidance for view " << ids[i] << " unreadable (" << e.what()
                            << "); regenerating\n";
        }
      }
    }
    RenderResult r = render(scene, hr, o.render);
    if (dir) {
      detail::quantize_f32(r.image.data);
      detail::quantize_f32(r.depth.data);
      detail::quantize_f32(r.depth.coverage);
      write_fimg(*dir / (ids[i] + ".fimg"), r.image);
      write_fimg_depth(*dir / (ids[i] + "_depth.fimg"), r.depth);
    }
    out.emplace(ids[i], InternalGuidance{std::move(r.image), std::move(r.depth)});
  }
  return out;
}

/// Joins external and internal guidance per view, checking that all four
/// buffers agree in size before any training step.
inline std::vector<GuidanceSet> assemble_guidance(const std::vector<ViewId>& ids,
                                                  const std::map<ViewId, ExternalGuidance>& external,
                                                  const std::map<ViewId, InternalGuidance>& internal) {
  std::vector<std::string> diag;
  std::vector<GuidanceSet> out;
  for (const auto& id : ids) {
    const auto e = external.find(id);
    const auto in = internal.find(id);
    if (e == external.end() || in == internal.end()) {
      diag.push_back("view " + id + ": missing " + std::string(e == external.end() ? "external" : "internal") +
                     " guidance");
      continue;
    }
    GuidanceSet g{id, e->second.image, e->second.depth, in->second.image, in->second.depth};
    const int w = g.internal_image.width, h = g.internal_image.height;
    if (g.external_image.width != w || g.external_image.height != h || g.external_depth.width != w ||
        g.external_depth.height != h || g.internal_depth.width != w || g.internal_depth.height != h ||
        g.external_image.channels != g.internal_image.channels)
      diag.push_back("view " + id + ": guidance buffers disagree in size");
    out.push_back(std::move(g));
  }
  if (!diag.empty()) throw GuidanceError(std::move(diag));
  return out;
}

}  // namespace iesrgs
