#include "prognet/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace prognet {

RawGrade parse_grade(const std::string& token) {
  if (token == "KL0") return RawGrade::KL0;
  if (token == "KL1") return RawGrade::KL1;
  if (token == "KL2") return RawGrade::KL2;
  if (token == "KL3") return RawGrade::KL3;
  if (token == "KL4") return RawGrade::KL4;
  if (token == "TKR") return RawGrade::TKR;
  if (token == "NA") return RawGrade::Missing;
  throw std::invalid_argument("unknown grade token '" + token + "'");
}

int grade_to_class(RawGrade g) {
  switch (g) {
    case RawGrade::KL0:
    case RawGrade::KL1: return 0;
    case RawGrade::KL2: return 1;
    case RawGrade::KL3: return 2;
    case RawGrade::KL4: return 3;
    case RawGrade::TKR: return 4;
    case RawGrade::Missing: return kMissingLabel;
  }
  return kMissingLabel;
}

std::vector<int> derive_progression(const std::vector<int>& stages) {
  if (stages.empty()) return {};
  const int k = static_cast<int>(stages.size()) - 1;
  std::vector<int> prog(static_cast<size_t>(k), kMissingLabel);
  if (stages[0] == kMissingLabel) return prog;
  int running_max = kMissingLabel;
  bool any_observed = false;
  for (int j = 1; j <= k; ++j) {
    if (stages[static_cast<size_t>(j)] != kMissingLabel) {
      any_observed = true;
      running_max = std::max(running_max, stages[static_cast<size_t>(j)]);
    }
    if (any_observed) prog[static_cast<size_t>(j - 1)] = running_max > stages[0] ? 1 : 0;
  }
  return prog;
}

LabelDerivation derive_labels(const std::vector<std::string>& visit_grades) {
  LabelDerivation out;
  out.stages.reserve(visit_grades.size());
  for (const auto& g : visit_grades) out.stages.push_back(grade_to_class(parse_grade(g)));
  out.progression = derive_progression(out.stages);
  return out;
}

Dataset Dataset::subset(const std::vector<size_t>& idx) const {
  Dataset out = *this;
  out.records.clear();
  for (size_t i : idx) out.records.push_back(records[i]);
  return out;
}

std::vector<CenterFold> split_one_center_out(const std::vector<ExamRecord>& records) {
  std::set<std::string> centers;
  for (const auto& r : records) centers.insert(r.center);
  if (centers.size() < 2)
    throw std::invalid_argument("split_one_center_out: need at least 2 centers, found " +
                                std::to_string(centers.size()));
  std::vector<CenterFold> folds;
  for (const auto& c : centers) {
    CenterFold f;
    f.test_center = c;
    for (size_t i = 0; i < records.size(); ++i)
      (records[i].center == c ? f.test : f.train).push_back(i);
    folds.push_back(std::move(f));
  }
  return folds;
}

std::vector<KFold> split_kfold(const std::vector<ExamRecord>& records, int k, Rng& rng) {
  if (k < 2) throw std::invalid_argument("split_kfold: k must be >= 2");
  if (records.size() < static_cast<size_t>(k))
    throw std::invalid_argument("split_kfold: " + std::to_string(records.size()) +
                                " records cannot fill " + std::to_string(k) + " folds");
  // subject groups; anonymous records form singleton groups
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < records.size(); ++i) {
    const std::string key =
        records[i].subject.empty() ? "@" + std::to_string(i) : records[i].subject;
    groups[key].push_back(i);
  }
  // stratum = baseline stage of the group's first labeled record
  std::map<int, std::vector<std::vector<size_t>>> strata;
  for (auto& [key, idx] : groups) {
    int stage = kMissingLabel;
    for (size_t i : idx)
      if (!records[i].stages.empty() && records[i].stages[0] != kMissingLabel) {
        stage = records[i].stages[0];
        break;
      }
    strata[stage].push_back(idx);
  }
  std::vector<size_t> fold_sizes(static_cast<size_t>(k), 0);
  std::vector<KFold> folds(static_cast<size_t>(k));
  for (auto& [stage, group_list] : strata) {
    rng.shuffle(group_list);
    for (const auto& g : group_list) {
      const size_t f = static_cast<size_t>(
          std::min_element(fold_sizes.begin(), fold_sizes.end()) - fold_sizes.begin());
      for (size_t i : g) folds[f].valid.push_back(i);
      fold_sizes[f] += g.size();
    }
  }
  for (int f = 0; f < k; ++f) {
    auto& fold = folds[static_cast<size_t>(f)];
    std::sort(fold.valid.begin(), fold.valid.end());
    std::set<size_t> in_valid(fold.valid.begin(), fold.valid.end());
    for (size_t i = 0; i < records.size(); ++i)
      if (!in_valid.count(i)) fold.train.push_back(i);
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

AugmentationPlan AugmentationPlan::radiograph() {
  using K = Step::Kind;
  AugmentationPlan p;
  p.name_ = "radiograph";
  p.steps = {
      {K::CenterCrop, 1.0, 700, 0, 0},
      {K::Resize, 1.0, 280, 0, 0},
      {K::GaussianNoise, 0.5, 0, 0, 0.3},
      {K::Rotation, 1.0, 0, -10, 10},
      {K::RandomCrop, 1.0, 256, 0, 0},
      {K::Gamma, 0.5, 0, 0.5, 1.5},
  };
  return p;
}

AugmentationPlan AugmentationPlan::scaled_to(int out_size) {
  AugmentationPlan p = radiograph();
  p.name_ = "scaled:" + std::to_string(out_size);
  const double u = out_size / 256.0;
  for (auto& s : p.steps)
    if (s.size > 0) s.size = std::max(1, static_cast<int>(std::lround(s.size * u)));
  p.steps[4].size = out_size;  // the final crop defines the model input size
  return p;
}

AugmentationPlan AugmentationPlan::eval_variant() const {
  using K = Step::Kind;
  AugmentationPlan p;
  p.name_ = name_ + ":eval";
  for (auto s : steps) {
    if (s.kind == K::RandomCrop) s.kind = K::CenterCrop;
    if (s.kind == K::CenterCrop || s.kind == K::Resize) {
      s.prob = 1.0;
      p.steps.push_back(s);
    }
  }
  return p;
}

AugmentationPlan AugmentationPlan::parse(const std::string& spec, int image_size) {
  if (spec.empty() || spec == "none") return none();
  if (spec == "radiograph") return radiograph();
  if (spec == "scaled") return scaled_to(image_size);
  throw std::invalid_argument("unknown augmentation plan '" + spec +
                              "' (want none, radiograph or scaled)");
}

ImageF augment(const ImageF& img, const AugmentationPlan& plan, Rng& rng) {
  using K = AugmentationPlan::Step::Kind;
  ImageF cur = img;
  for (const auto& s : plan.steps) {
    const bool apply = s.prob >= 1.0 || rng.bernoulli(s.prob);
    switch (s.kind) {
      case K::CenterCrop:
        if (apply) cur = center_crop(cur, s.size);
        break;
      case K::Resize:
        if (apply) cur = resize_bilinear(cur, s.size, s.size);
        break;
      case K::GaussianNoise:
        if (apply) cur = add_gaussian_noise(cur, s.hi * rng.uniform01(), rng);
        break;
      case K::Rotation:
        if (apply) {
          const double deg = rng.uniform(s.lo, s.hi);
          cur = rotate_bilinear(cur, deg * M_PI / 180.0);
        }
        break;
      case K::RandomCrop:
        if (apply) {
          if (cur.h < s.size || cur.w < s.size)
            throw std::invalid_argument("augment: random crop " + std::to_string(s.size) +
                                        " exceeds image " + std::to_string(cur.h) + "x" +
                                        std::to_string(cur.w));
          const int top = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cur.h - s.size + 1)));
          const int left = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cur.w - s.size + 1)));
          cur = crop(cur, top, left, s.size);
        }
        break;
      case K::Gamma:
        if (apply) cur = gamma_correct(cur, rng.uniform(s.lo, s.hi));
        break;
    }
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

constexpr char kPackMagic[8] = {'P', 'K', 'I', 'M', 'G', 'U', '8', '\n'};

void write_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_pack(const std::string& path, const std::vector<ImageU8>& images) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write pack file: " + path);
  os.write(kPackMagic, 8);
  const uint32_t h = images.empty() ? 0 : static_cast<uint32_t>(images[0].h);
  const uint32_t w = images.empty() ? 0 : static_cast<uint32_t>(images[0].w);
  write_u32le(os, static_cast<uint32_t>(images.size()));
  write_u32le(os, h);
  write_u32le(os, w);
  for (const auto& img : images) {
    if (static_cast<uint32_t>(img.h) != h || static_cast<uint32_t>(img.w) != w)
      throw std::invalid_argument("write_pack: images must share one size");
    os.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<ImageU8> read_pack(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open pack file: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kPackMagic, 8) != 0)
    throw std::runtime_error("not a packed image file: " + path);
  const uint32_t count = read_u32le(is), h = read_u32le(is), w = read_u32le(is);
  std::vector<ImageU8> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    ImageU8 img{static_cast<int>(h), static_cast<int>(w),
                std::vector<uint8_t>(static_cast<size_t>(h) * w)};
    is.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (!is) throw std::runtime_error("truncated pack file: " + path);
    out.push_back(std::move(img));
  }
  return out;
}

ImageU8 read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("unsupported image format (want P5 pgm): " + path);
  int w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  is.get();
  if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("bad pgm header: " + path);
  ImageU8 img{h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w)};
  is.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (!is) throw std::runtime_error("truncated pgm: " + path);
  return img;
}

void write_pgm(const std::string& path, const ImageU8& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image: " + path);
  os << "P5\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
}

std::string MissingnessReport::to_string() const {
  std::ostringstream os;
  os << n_records << " records";
  for (size_t i = 0; i < stage_missing.size(); ++i)
    os << "; y" << i << " missing " << stage_missing[i];
  for (size_t i = 0; i < progression_missing.size(); ++i)
    os << "; prog" << i + 1 << " missing " << progression_missing[i];
  return os.str();
}

MissingnessReport missingness(const Dataset& ds) {
  MissingnessReport rep;
  rep.n_records = static_cast<long>(ds.records.size());
  rep.stage_missing.assign(static_cast<size_t>(ds.horizons) + 1, 0);
  rep.progression_missing.assign(static_cast<size_t>(ds.horizons), 0);
  for (const auto& r : ds.records) {
    for (size_t j = 0; j < r.stages.size(); ++j)
      if (r.stages[j] == kMissingLabel) ++rep.stage_missing[j];
    for (size_t j = 0; j < r.progression.size(); ++j)
      if (r.progression[j] == kMissingLabel) ++rep.progression_missing[j];
  }
  return rep;
}

void write_manifest(const std::string& path, const Dataset& ds, const std::string& pack_name) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest: " + path);
  os << "# prognet dataset manifest\n";
  os << "# n_classes=" << ds.n_classes << "\n";
  os << "# horizons=" << ds.horizons << "\n";
  os << "# horizon_years=";
  for (size_t i = 0; i < ds.horizon_years.size(); ++i) os << (i ? "," : "") << ds.horizon_years[i];
  os << "\n";
  if (ds.transition_prob >= 0) os << "# transition_prob=" << ds.transition_prob << "\n";
  if (!pack_name.empty()) os << "# images=" << pack_name << "\n";
  const size_t n_clin = ds.records.empty() ? 0 : ds.records[0].clinical.size();
  os << "image\tcenter\tsubject";
  for (size_t j = 0; j < n_clin; ++j) os << "\tclin" << j;
  for (int j = 0; j <= ds.horizons; ++j) os << "\ty" << j;
  os << "\n";
  for (const auto& r : ds.records) {
    os << r.image_ref << "\t" << r.center << "\t" << r.subject;
    for (double c : r.clinical) os << "\t" << c;
    for (int s : r.stages) {
      if (s == kMissingLabel)
        os << "\tNA";
      else
        os << "\t" << s;
    }
    os << "\n";
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

Dataset load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest: " + path);
  const auto dir = std::filesystem::path(path).parent_path();

  Dataset ds;
  std::string pack_name;
  std::string line;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      while (!key.empty() && key.front() == ' ') key.erase(key.begin());
      while (!key.empty() && key.back() == ' ') key.pop_back();
      const std::string value = line.substr(eq + 1);
      if (key == "n_classes") ds.n_classes = std::stoi(value);
      else if (key == "horizons") ds.horizons = std::stoi(value);
      else if (key == "transition_prob") ds.transition_prob = std::stod(value);
      else if (key == "images") pack_name = value;
      else if (key == "horizon_years") {
        std::stringstream ss(value);
        std::string tok;
        while (std::getline(ss, tok, ',')) ds.horizon_years.push_back(std::stod(tok));
      }
      continue;
    }
    header = split_tabs(line);
    break;
  }
  if (header.size() < 4 || header[0] != "image")
    throw std::runtime_error("manifest missing header row: " + path);

  size_t n_clin = 0, first_stage = 3;
  for (size_t j = 3; j < header.size(); ++j) {
    if (header[j].rfind("clin", 0) == 0) {
      ++n_clin;
      first_stage = j + 1;
    }
  }
  const size_t n_stage_cols = header.size() - first_stage;
  if (n_stage_cols < 1) throw std::runtime_error("manifest has no stage columns: " + path);
  ds.horizons = static_cast<int>(n_stage_cols) - 1;
  if (ds.horizon_years.empty())
    for (int j = 1; j <= ds.horizons; ++j) ds.horizon_years.push_back(j);

  std::vector<ImageU8> pack;
  if (!pack_name.empty()) pack = read_pack((dir / pack_name).string());
  std::map<std::string, int> loose_cache;

  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cols = split_tabs(line);
    if (cols.size() != header.size())
      throw std::runtime_error("manifest row has " + std::to_string(cols.size()) +
                               " columns, expected " + std::to_string(header.size()) + ": " + path);
    ExamRecord r;
    r.image_ref = cols[0];
    r.center = cols[1];
    r.subject = cols[2];
    for (size_t j = 0; j < n_clin; ++j) r.clinical.push_back(std::stod(cols[3 + j]));
    for (size_t j = first_stage; j < cols.size(); ++j) {
      if (cols[j] == "NA") {
        r.stages.push_back(kMissingLabel);
      } else {
        const int s = std::stoi(cols[j]);
        if (s < 0 || s >= ds.n_classes)
          throw std::runtime_error("stage " + std::to_string(s) + " out of range for " +
                                   std::to_string(ds.n_classes) + " classes: " + path);
        r.stages.push_back(s);
      }
    }
    r.progression = derive_progression(r.stages);
    if (r.image_ref.rfind("pack@", 0) == 0) {
      const int idx = std::stoi(r.image_ref.substr(5));
      if (pack_name.empty() || idx < 0 || static_cast<size_t>(idx) >= pack.size())
        throw std::runtime_error("manifest references pack image " + r.image_ref +
                                 " but the pack has " + std::to_string(pack.size()) + " images");
      r.image_index = idx;
    } else {
      const std::string full = (dir / r.image_ref).string();
      auto it = loose_cache.find(full);
      if (it == loose_cache.end()) {
        ds.images.push_back(read_pgm(full));
        it = loose_cache.emplace(full, static_cast<int>(ds.images.size()) - 1).first;
      }
      r.image_index = it->second;
    }
    ds.records.push_back(std::move(r));
  }
  if (!pack_name.empty()) {
    // loose images, if any, were appended after the pack block
    const int offset = static_cast<int>(pack.size());
    for (auto& r : ds.records)
      if (r.image_ref.rfind("pack@", 0) != 0) r.image_index += offset;
    std::vector<ImageU8> all = std::move(pack);
    for (auto& img : ds.images) all.push_back(std::move(img));
    ds.images = std::move(all);
  }
  return ds;
}

}  // namespace prognet
