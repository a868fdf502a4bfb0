#include "diffsan/purify.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include "diffsan/common.hpp"
#include "diffsan/digest.hpp"

namespace diffsan {

namespace fs = std::filesystem;

void PurifyParams::validate(uint32_t schedule_steps) const {
  if (n < 1) throw ConfigError("purify.n must be >= 1");
  if (m < 1) throw ConfigError("purify.m must be >= 1");
  if (m > T) throw ConfigError("purify.m must not exceed purify.T");
  if (T < 1 || T > schedule_steps)
    throw ConfigError("purify.T must be in [1, " + std::to_string(schedule_steps) + "]");
  if (tau < 1 || tau > static_cast<uint64_t>(n) * m)
    throw ConfigError("purify.tau must be in [1, n*m]");
}

namespace {

ImageTensor mat_to_image(const nn::Mat& x, int c, int h, int w) {
  ImageTensor img;
  img.channels = c;
  img.height = h;
  img.width = w;
  img.data.resize(static_cast<size_t>(c) * h * w);
  Eigen::Map<nn::Mat>(img.data.data(), h * w, c) = x.transpose();
  return img;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_bytes_atomic(const fs::path& path, const char* data, size_t len) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StageError("cannot write " + tmp.string());
    out.write(data, static_cast<std::streamsize>(len));
    if (!out) throw StageError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

fs::path bin_path(const fs::path& dir, uint32_t id) { return dir / (std::to_string(id) + ".bin"); }
fs::path meta_path(const fs::path& dir, uint32_t id) {
  return dir / (std::to_string(id) + ".meta");
}

std::string record_digest(const fs::path& dir, uint32_t id) {
  Sha256 h;
  std::string bin = read_bytes(bin_path(dir, id));
  std::string meta = read_bytes(meta_path(dir, id));
  h.update(bin.data(), bin.size());
  h.update(meta.data(), meta.size());
  return h.hex();
}

constexpr const char* kParamsFormat = "diffsan.candidates.v1";
constexpr const char* kManifestFormat = "diffsan.candidates.manifest.v1";

void write_record(const fs::path& dir, uint32_t id, const CandidateSet& cs) {
  std::string bin;
  bin.reserve(cs.entries.size() * cs.entries.at(0).image.data.size() * sizeof(float));
  std::string meta;
  for (const CandidateEntry& e : cs.entries) {
    bin.append(reinterpret_cast<const char*>(e.image.data.data()),
               e.image.data.size() * sizeof(float));
    meta += std::to_string(e.round) + "\t" + std::to_string(e.step) + "\t" +
            std::to_string(e.label) + "\n";
  }
  write_bytes_atomic(bin_path(dir, id), bin.data(), bin.size());
  write_bytes_atomic(meta_path(dir, id), meta.data(), meta.size());
}

void write_cache_manifest(const fs::path& dir, const KvDoc& params, uint64_t total) {
  KvDoc manifest;
  manifest.set("format", kManifestFormat);
  manifest.set_u64("count", total);
  manifest.set("params.digest", sha256_hex(params.canonical_string()));
  for (uint64_t id = 0; id < total; ++id)
    manifest.set("record." + std::to_string(id), record_digest(dir, id));
  manifest.write_file(dir / "MANIFEST");
}

}  // namespace

CandidateSet purify_sample(const ImageTensor& x, uint32_t sample_id, const PurifyParams& p,
                           Denoiser& den, const NoiseSchedule& sched, VarianceMode mode,
                           Classifier& victim, RngStream& rng) {
  p.validate(sched.steps());
  if (den.channels() != static_cast<uint32_t>(x.channels))
    throw ConfigError("denoiser channel count does not match the image");

  const int c = x.channels, h = x.height, w = x.width;
  CandidateSet cs;
  cs.sample_id = sample_id;
  cs.entries.reserve(static_cast<size_t>(p.n) * p.m);

  ImageTensor work = x;  // round input, always in [0, 1]
  for (uint32_t round = 1; round <= p.n; ++round) {
    ImageTensor jumped = forward_diffuse(work, sched, p.T, rng);
    nn::Mat xm =
        Eigen::Map<const nn::Mat>(jumped.data.data(), h * w, c).transpose();
    for (uint32_t t = p.T; t >= 1; --t) {
      reverse_step_inplace(xm, h, w, t, den, sched, mode, rng);
      if (t - 1 < p.m) {
        CandidateEntry e;
        e.round = static_cast<uint16_t>(round);
        e.step = static_cast<uint16_t>(t - 1);
        e.image = mat_to_image(xm, c, h, w);
        e.image.clamp01();
        e.label = victim.predict_one(e.image);
        cs.entries.push_back(std::move(e));
      }
    }
    work = mat_to_image(xm, c, h, w);
    work.clamp01();
  }
  return cs;
}

std::string schedule_digest(const NoiseSchedule& sched) {
  Sha256 h;
  uint32_t steps = sched.steps();
  h.update(&steps, sizeof(steps));
  h.update(sched.beta.data(), sched.beta.size() * sizeof(float));
  return h.hex();
}

std::string registry_digest(const nn::ParamRegistry& reg) {
  Sha256 h;
  for (const nn::Param* p : reg.items)
    h.update(p->w.data(), static_cast<size_t>(p->w.size()) * sizeof(float));
  return h.hex();
}

KvDoc candidate_cache_params(const LabeledDataset& ds, const PurifyParams& p,
                             const NoiseSchedule& sched, VarianceMode mode,
                             const std::string& denoiser_digest, const std::string& victim_digest,
                             uint64_t diffusion_seed) {
  // tau is deliberately absent: it only affects downstream voting, so one
  // cache serves every tau.
  KvDoc d;
  d.set("format", kParamsFormat);
  d.set_u64("count", ds.samples.size());
  const ImageTensor& img0 = ds.samples.at(0).image;
  d.set_u64("image.channels", static_cast<uint64_t>(img0.channels));
  d.set_u64("image.height", static_cast<uint64_t>(img0.height));
  d.set_u64("image.width", static_cast<uint64_t>(img0.width));
  d.set_u64("purify.T", p.T);
  d.set_u64("purify.n", p.n);
  d.set_u64("purify.m", p.m);
  d.set("variance", mode == VarianceMode::FixedSmall ? "fixed_small" : "fixed_large");
  d.set_u64("schedule.steps", sched.steps());
  d.set("schedule.digest", schedule_digest(sched));
  d.set("denoiser.digest", denoiser_digest);
  d.set("victim.digest", victim_digest);
  d.set("dataset.digest", dataset_digest(ds));
  d.set_u64("seed", diffusion_seed);
  return d;
}

void build_candidate_sets(const LabeledDataset& ds, const PurifyParams& p, Denoiser& den,
                          const NoiseSchedule& sched, VarianceMode mode, Classifier& victim,
                          uint64_t diffusion_seed, const CacheBuildOptions& opt) {
  p.validate(sched.steps());
  ds.validate();
  if (ds.samples.empty()) throw ConfigError("candidate build needs a non-empty dataset");

  fs::create_directories(opt.dir);
  KvDoc want = candidate_cache_params(ds, p, sched, mode, opt.denoiser_digest,
                                      registry_digest(victim.params()), diffusion_seed);
  const fs::path params_file = opt.dir / "params.txt";
  if (fs::exists(params_file)) {
    if (!(KvDoc::read_file(params_file) == want))
      throw IntegrityError("candidate cache " + opt.dir.string() +
                           " was built with different parameters");
  } else {
    want.write_file(params_file);
  }
  if (fs::exists(opt.dir / "MANIFEST")) return;  // already complete, params verified above

  const uint64_t total = ds.samples.size();
  const uint64_t build_n = std::min<uint64_t>(total, opt.limit);
  for (uint64_t id = 0; id < build_n; ++id) {
    if (fs::exists(bin_path(opt.dir, id)) && fs::exists(meta_path(opt.dir, id))) continue;
    RngStream rng(child_seed(diffusion_seed, id));
    CandidateSet cs = purify_sample(ds.samples[id].image, static_cast<uint32_t>(id), p, den,
                                    sched, mode, victim, rng);
    write_record(opt.dir, static_cast<uint32_t>(id), cs);
    if (opt.progress_every && (id + 1) % opt.progress_every == 0)
      std::fprintf(stderr, "candidates: %llu/%llu\n", static_cast<unsigned long long>(id + 1),
                   static_cast<unsigned long long>(total));
  }

  if (build_n < total) return;  // partial build by request; no MANIFEST yet
  write_cache_manifest(opt.dir, want, total);
}

void derive_cache_with_smaller_m(const fs::path& src, const fs::path& dst, uint32_t new_m) {
  CandidateCache c = CandidateCache::open(src);
  const auto old_m = static_cast<uint32_t>(c.params().get_u64("purify.m"));
  if (new_m < 1 || new_m > old_m)
    throw ConfigError("derived cache needs 1 <= new m <= cached m");

  KvDoc params = c.params();
  params.set_u64("purify.m", new_m);
  fs::create_directories(dst);
  const fs::path params_file = dst / "params.txt";
  if (fs::exists(params_file)) {
    if (!(KvDoc::read_file(params_file) == params))
      throw IntegrityError("derived cache " + dst.string() + " holds different parameters");
  } else {
    params.write_file(params_file);
  }
  if (fs::exists(dst / "MANIFEST")) return;

  for (uint32_t id = 0; id < c.count(); ++id) {
    CandidateSet full = c.load(id);
    CandidateSet cut;
    cut.sample_id = id;
    for (CandidateEntry& e : full.entries)
      if (e.step < new_m) cut.entries.push_back(std::move(e));
    write_record(dst, id, cut);
  }
  write_cache_manifest(dst, params, c.count());
}

CandidateCache CandidateCache::open(const fs::path& dir) {
  CandidateCache c;
  c.dir_ = dir;
  if (!fs::exists(dir / "MANIFEST"))
    throw IntegrityError("candidate cache " + dir.string() + " is incomplete (no MANIFEST)");
  c.params_ = KvDoc::read_file(dir / "params.txt");
  c.manifest_ = KvDoc::read_file(dir / "MANIFEST");
  if (c.params_.get_str("format") != kParamsFormat)
    throw IntegrityError("unrecognized candidate cache params format");
  if (c.manifest_.get_str("format") != kManifestFormat)
    throw IntegrityError("unrecognized candidate cache manifest format");
  if (c.manifest_.get_str("params.digest") != sha256_hex(c.params_.canonical_string()))
    throw IntegrityError("candidate cache manifest does not match params.txt");
  c.count_ = static_cast<uint32_t>(c.manifest_.get_u64("count"));
  if (c.count_ != c.params_.get_u64("count"))
    throw IntegrityError("candidate cache record count disagrees with params.txt");
  c.entries_per_sample_ =
      static_cast<uint32_t>(c.params_.get_u64("purify.n") * c.params_.get_u64("purify.m"));
  c.channels_ = static_cast<uint32_t>(c.params_.get_u64("image.channels"));
  c.height_ = static_cast<uint32_t>(c.params_.get_u64("image.height"));
  c.width_ = static_cast<uint32_t>(c.params_.get_u64("image.width"));
  return c;
}

CandidateSet CandidateCache::load(uint32_t id) const {
  if (id >= count_) throw ConfigError("candidate record id out of range");
  if (record_digest(dir_, id) != manifest_.get_str("record." + std::to_string(id)))
    throw IntegrityError("candidate record " + std::to_string(id) + " fails its digest check");

  std::string bin = read_bytes(bin_path(dir_, id));
  std::string meta = read_bytes(meta_path(dir_, id));
  const size_t pixels = static_cast<size_t>(channels_) * height_ * width_;
  if (bin.size() != entries_per_sample_ * pixels * sizeof(float))
    throw IntegrityError("candidate record " + std::to_string(id) + " has the wrong size");

  CandidateSet cs;
  cs.sample_id = id;
  cs.entries.resize(entries_per_sample_);
  std::vector<std::string> rows = split(meta, '\n');
  while (!rows.empty() && trim(rows.back()).empty()) rows.pop_back();
  if (rows.size() != entries_per_sample_)
    throw IntegrityError("candidate record " + std::to_string(id) + " has the wrong row count");
  for (uint32_t i = 0; i < entries_per_sample_; ++i) {
    std::vector<std::string> f = split(rows[i], '\t');
    if (f.size() != 3)
      throw IntegrityError("candidate record " + std::to_string(id) + " has a malformed row");
    CandidateEntry& e = cs.entries[i];
    try {
      e.round = static_cast<uint16_t>(std::stoul(f[0]));
      e.step = static_cast<uint16_t>(std::stoul(f[1]));
      e.label = static_cast<uint16_t>(std::stoul(f[2]));
    } catch (const std::exception&) {
      throw IntegrityError("candidate record " + std::to_string(id) + " has a malformed row");
    }
    e.image.channels = static_cast<int>(channels_);
    e.image.height = static_cast<int>(height_);
    e.image.width = static_cast<int>(width_);
    e.image.data.resize(pixels);
    std::memcpy(e.image.data.data(), bin.data() + static_cast<size_t>(i) * pixels * sizeof(float),
                pixels * sizeof(float));
  }
  return cs;
}

std::vector<CandidateCache::EntryMeta> CandidateCache::load_meta(uint32_t id) const {
  if (id >= count_) throw ConfigError("candidate record id out of range");
  if (record_digest(dir_, id) != manifest_.get_str("record." + std::to_string(id)))
    throw IntegrityError("candidate record " + std::to_string(id) + " fails its digest check");

  std::string meta = read_bytes(meta_path(dir_, id));
  std::vector<std::string> rows = split(meta, '\n');
  while (!rows.empty() && trim(rows.back()).empty()) rows.pop_back();
  if (rows.size() != entries_per_sample_)
    throw IntegrityError("candidate record " + std::to_string(id) + " has the wrong row count");
  std::vector<EntryMeta> out(entries_per_sample_);
  for (uint32_t i = 0; i < entries_per_sample_; ++i) {
    std::vector<std::string> f = split(rows[i], '\t');
    if (f.size() != 3)
      throw IntegrityError("candidate record " + std::to_string(id) + " has a malformed row");
    try {
      out[i].round = static_cast<uint16_t>(std::stoul(f[0]));
      out[i].step = static_cast<uint16_t>(std::stoul(f[1]));
      out[i].label = static_cast<uint16_t>(std::stoul(f[2]));
    } catch (const std::exception&) {
      throw IntegrityError("candidate record " + std::to_string(id) + " has a malformed row");
    }
  }
  return out;
}

}  // namespace diffsan
