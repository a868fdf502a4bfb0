#include "diffsan/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "diffsan/common.hpp"
#include "diffsan/digest.hpp"
#include "diffsan/kv.hpp"

namespace diffsan {

namespace fs = std::filesystem;

void ImageTensor::clamp01() {
  for (float& v : data) v = std::min(1.0f, std::max(0.0f, v));
}

void LabeledDataset::validate() const {
  if (num_classes == 0) throw IntegrityError("dataset: num_classes is zero");
  for (size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.id != i)
      throw IntegrityError("dataset: ids not dense at position " + std::to_string(i));
    if (s.label >= num_classes)
      throw IntegrityError("dataset: label " + std::to_string(s.label) + " out of range for id " +
                           std::to_string(s.id));
    if (!samples[0].image.same_shape(s.image))
      throw IntegrityError("dataset: shape mismatch at id " + std::to_string(s.id));
    if (s.image.size() == 0) throw IntegrityError("dataset: empty image at id " + std::to_string(s.id));
  }
}

std::string dataset_digest(const LabeledDataset& ds) {
  Sha256 h;
  for (const Sample& s : ds.samples) h.update_vec(s.image.data);
  for (const Sample& s : ds.samples) {
    uint32_t label = s.label;
    unsigned char b[4] = {static_cast<unsigned char>(label & 0xff),
                          static_cast<unsigned char>((label >> 8) & 0xff),
                          static_cast<unsigned char>((label >> 16) & 0xff),
                          static_cast<unsigned char>((label >> 24) & 0xff)};
    h.update(b, 4);
  }
  return h.hex();
}

void save_dataset(const LabeledDataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);

  {
    std::ofstream img(dir / "images.bin", std::ios::binary | std::ios::trunc);
    if (!img) throw StageError("cannot write " + (dir / "images.bin").string());
    for (const Sample& s : ds.samples)
      img.write(reinterpret_cast<const char*>(s.image.data.data()),
                static_cast<std::streamsize>(s.image.data.size() * sizeof(float)));
    if (!img) throw StageError("short write: images.bin");
  }
  {
    std::ofstream lab(dir / "labels.tsv", std::ios::trunc);
    if (!lab) throw StageError("cannot write " + (dir / "labels.tsv").string());
    for (const Sample& s : ds.samples) lab << s.id << '\t' << s.label << '\n';
  }
  KvDoc man;
  man.set("format", "dataset.v1");
  man.set_u64("count", ds.size());
  man.set_u64("num_classes", ds.num_classes);
  man.set_u64("channels", ds.channels());
  man.set_u64("height", ds.height());
  man.set_u64("width", ds.width());
  man.set("digest", dataset_digest(ds));
  man.write_file(dir / "manifest.txt");
}

LabeledDataset load_dataset(const fs::path& dir) {
  KvDoc man;
  try {
    man = KvDoc::read_file(dir / "manifest.txt");
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("dataset manifest: ") + e.what());
  }
  LabeledDataset ds;
  uint64_t count = man.get_u64("count");
  ds.num_classes = static_cast<uint32_t>(man.get_u64("num_classes"));
  uint32_t c = static_cast<uint32_t>(man.get_u64("channels"));
  uint32_t hgt = static_cast<uint32_t>(man.get_u64("height"));
  uint32_t wid = static_cast<uint32_t>(man.get_u64("width"));
  std::string want_digest = man.get_str("digest");

  size_t per = size_t(c) * hgt * wid;
  std::ifstream img(dir / "images.bin", std::ios::binary);
  if (!img) throw IntegrityError("missing images.bin in " + dir.string());
  img.seekg(0, std::ios::end);
  uint64_t bytes = static_cast<uint64_t>(img.tellg());
  img.seekg(0);
  if (bytes != count * per * sizeof(float))
    throw IntegrityError("images.bin size " + std::to_string(bytes) + " does not match manifest count");

  std::ifstream lab(dir / "labels.tsv");
  if (!lab) throw IntegrityError("missing labels.tsv in " + dir.string());

  ds.samples.resize(count);
  std::string line;
  size_t row = 0;
  while (std::getline(lab, line)) {
    std::string t = trim(line);
    if (t.empty()) continue;
    if (row >= count) throw IntegrityError("labels.tsv has more rows than manifest count");
    auto cols = split(t, '\t');
    if (cols.size() != 2) throw IntegrityError("labels.tsv row " + std::to_string(row) + ": bad format");
    Sample& s = ds.samples[row];
    s.id = static_cast<uint32_t>(std::stoul(cols[0]));
    unsigned long raw = std::stoul(cols[1]);
    if (raw >= ds.num_classes)
      throw IntegrityError("labels.tsv row " + std::to_string(row) + ": label out of range");
    s.label = static_cast<uint16_t>(raw);
    s.image = ImageTensor(c, hgt, wid);
    img.read(reinterpret_cast<char*>(s.image.data.data()),
             static_cast<std::streamsize>(per * sizeof(float)));
    if (!img) throw IntegrityError("images.bin truncated at row " + std::to_string(row));
    s.image.clamp01();
    ++row;
  }
  if (row != count)
    throw IntegrityError("labels.tsv has " + std::to_string(row) + " rows, manifest says " +
                         std::to_string(count));
  ds.validate();
  std::string got = dataset_digest(ds);
  if (got != want_digest)
    throw IntegrityError("dataset digest mismatch in " + dir.string() + ": manifest " + want_digest +
                         ", payload " + got);
  return ds;
}

std::vector<uint32_t> class_histogram(const LabeledDataset& ds) {
  std::vector<uint32_t> hist(ds.num_classes, 0);
  for (const Sample& s : ds.samples) hist[s.label]++;
  return hist;
}

void save_ledger(const PoisonLedger& ledger, const fs::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw StageError("cannot write " + file.string());
  for (const LedgerEntry& e : ledger.entries)
    out << e.id << '\t' << (e.is_poisoned ? 1 : 0) << '\t' << e.original_label << '\t'
        << e.trigger_id << '\n';
}

PoisonLedger load_ledger(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IntegrityError("missing ledger: " + file.string());
  PoisonLedger ledger;
  std::string line;
  size_t row = 0;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty()) continue;
    auto cols = split(t, '\t');
    if (cols.size() != 4) throw IntegrityError("ledger row " + std::to_string(row) + ": bad format");
    LedgerEntry e;
    e.id = static_cast<uint32_t>(std::stoul(cols[0]));
    e.is_poisoned = cols[1] == "1";
    if (!e.is_poisoned && cols[1] != "0")
      throw IntegrityError("ledger row " + std::to_string(row) + ": bad is_poisoned");
    e.original_label = static_cast<uint16_t>(std::stoul(cols[2]));
    e.trigger_id = cols[3];
    if (e.id != row) throw IntegrityError("ledger ids not dense at row " + std::to_string(row));
    ledger.entries.push_back(std::move(e));
    ++row;
  }
  return ledger;
}

}  // namespace diffsan
