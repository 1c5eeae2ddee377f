#include "dddr/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dddr/rng.hpp"

namespace dddr {

std::vector<std::size_t> Corpus::indices_of(std::uint32_t label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].label == label) out.push_back(i);
  return out;
}

Tensor Corpus::gather(std::span<const std::size_t> indices) const {
  const std::size_t d = image.numel();
  if (indices.empty()) throw DataError("gather: empty index list");
  Tensor out({indices.size(), d});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& px = items.at(indices[r]).pixels;
    std::copy(px.values().begin(), px.values().end(), out.data() + r * d);
  }
  return out;
}

std::vector<std::uint32_t> Corpus::labels_of(std::span<const std::size_t> indices) const {
  std::vector<std::uint32_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(items.at(i).label);
  return out;
}

Tensor stack_images(std::span<const LabeledImage> images) {
  if (images.empty()) throw DataError("stack_images: no images");
  const std::size_t d = images.front().pixels.size();
  Tensor out({images.size(), d});
  for (std::size_t r = 0; r < images.size(); ++r) {
    if (images[r].pixels.size() != d) throw ShapeError("stack_images: images differ in size");
    std::copy(images[r].pixels.values().begin(), images[r].pixels.values().end(), out.data() + r * d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape corpus

std::vector<ShapeClass> desk_shape_classes() {
  std::vector<ShapeClass> out;
  for (auto fill : {FillPattern::Solid, FillPattern::Outline})
    for (auto shape : {ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross})
      out.push_back({shape, fill});
  return out;
}

CorpusSpec desk_client_spec(std::uint64_t seed, std::size_t samples_per_class) {
  CorpusSpec spec;
  spec.classes = desk_shape_classes();
  spec.samples_per_class = samples_per_class;
  spec.seed = seed;
  return spec;
}

CorpusSpec desk_pretraining_spec(std::uint64_t seed, std::size_t samples_per_class) {
  CorpusSpec spec = desk_client_spec(seed ^ 0x70726574726169ULL, samples_per_class);
  spec.jitter.scale_min = 0.72f;
  spec.jitter.scale_max = 0.84f;
  spec.jitter.intensity_min = 0.64f;
  spec.jitter.intensity_max = 0.80f;
  return spec;
}

std::string class_name(const ShapeClass& c) {
  static const char* shapes[] = {"disk", "square", "triangle", "cross", "diamond"};
  static const char* fills[] = {"solid", "outline", "stripes"};
  return std::string(fills[static_cast<int>(c.fill)]) + "-" + shapes[static_cast<int>(c.shape)];
}

namespace {

// Unit-radius membership in shape-local coordinates.
bool inside_shape(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::Disk: return u * u + v * v <= 1.0;
    case ShapeKind::Square: return std::max(std::abs(u), std::abs(v)) <= 0.82;
    case ShapeKind::Triangle: return v <= 0.78 && v >= -0.95 && std::abs(u) <= 1.0 * (v + 0.95) / 1.73;
    case ShapeKind::Cross:
      return (std::abs(u) <= 0.32 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.32 && std::abs(u) <= 1.0);
    case ShapeKind::Diamond: return std::abs(u) + std::abs(v) <= 1.0;
  }
  return false;
}

bool covered(const ShapeClass& c, double u, double v, double radius_px, double py) {
  if (!inside_shape(c.shape, u, v)) return false;
  switch (c.fill) {
    case FillPattern::Solid: return true;
    case FillPattern::Outline: {
      // Roughly 1.6px band: the shape minus a shrunken copy of itself.
      const double inner = std::max(0.05, 1.0 - 1.6 / radius_px);
      return !inside_shape(c.shape, u / inner, v / inner);
    }
    case FillPattern::Stripes: return static_cast<long>(std::floor(py / 2.0)) % 2 == 0;
  }
  return false;
}

}  // namespace

Corpus generate_shapeworld(const CorpusSpec& spec) {
  if (spec.height < 8 || spec.width < 8)
    throw DataError("generate_shapeworld: image " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                    " is too small to render shapes (min 8x8)");
  if (spec.classes.empty()) throw DataError("generate_shapeworld: no classes");
  if (spec.samples_per_class == 0) throw DataError("generate_shapeworld: samples_per_class must be positive");
  for (std::size_t i = 0; i < spec.classes.size(); ++i)
    for (std::size_t j = i + 1; j < spec.classes.size(); ++j)
      if (spec.classes[i] == spec.classes[j]) throw DataError("generate_shapeworld: duplicate class " + class_name(spec.classes[i]));
  const auto& jit = spec.jitter;
  if (!(jit.scale_min > 0.0f && jit.scale_min <= jit.scale_max && jit.intensity_min <= jit.intensity_max &&
        jit.noise_std >= 0.0f && jit.max_offset >= 0.0f))
    throw DataError("generate_shapeworld: invalid jitter ranges");

  Corpus corpus;
  corpus.image = {1, spec.height, spec.width};
  corpus.class_count = spec.classes.size();
  corpus.items.reserve(spec.classes.size() * spec.samples_per_class);

  const double half = 0.5 * static_cast<double>(std::min(spec.height, spec.width));
  constexpr int kSuper = 4;
  for (std::uint32_t label = 0; label < spec.classes.size(); ++label) {
    const ShapeClass& cls = spec.classes[label];
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      Rng rng = Rng::keyed(spec.seed, {Rng::purpose("shapeworld"), label, s});
      const double radius = half * (jit.scale_min + (jit.scale_max - jit.scale_min) * rng.uniform());
      const double cx = 0.5 * static_cast<double>(spec.width) + jit.max_offset * (2.0 * rng.uniform() - 1.0);
      const double cy = 0.5 * static_cast<double>(spec.height) + jit.max_offset * (2.0 * rng.uniform() - 1.0);
      const double intensity = jit.intensity_min + (jit.intensity_max - jit.intensity_min) * rng.uniform();

      Tensor px({1, spec.height, spec.width});
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
          int hits = 0;
          for (int sy = 0; sy < kSuper; ++sy)
            for (int sx = 0; sx < kSuper; ++sx) {
              const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
              const double pxx = static_cast<double>(x) + (sx + 0.5) / kSuper;
              hits += covered(cls, (pxx - cx) / radius, (py - cy) / radius, radius, py) ? 1 : 0;
            }
          const double coverage = static_cast<double>(hits) / (kSuper * kSuper);
          const double value = intensity * coverage + jit.noise_std * rng.normal();
          px[y * spec.width + x] = quantize_u8(static_cast<float>(value));
        }
      }
      corpus.items.push_back({std::move(px), label});
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::uint32_t read_be32(const std::string& b, std::size_t pos) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 3]));
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xffu));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IdxError(IdxErrorCode::Io, "cannot open IDX file " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

Corpus parse_idx(const std::string& img, const std::string& lab) {
  if (img.size() < 4 || read_be32(img, 0) != 0x00000803u)
    throw IdxError(IdxErrorCode::BadMagic, "IDX images: bad magic (expected 00 00 08 03)");
  if (lab.size() < 4 || read_be32(lab, 0) != 0x00000801u)
    throw IdxError(IdxErrorCode::BadMagic, "IDX labels: bad magic (expected 00 00 08 01)");
  if (img.size() < 16) throw IdxError(IdxErrorCode::Truncated, "IDX images: truncated header");
  if (lab.size() < 8) throw IdxError(IdxErrorCode::Truncated, "IDX labels: truncated header");
  const std::size_t n = read_be32(img, 4), h = read_be32(img, 8), w = read_be32(img, 12);
  const std::size_t nl = read_be32(lab, 4);
  if (n != nl)
    throw IdxError(IdxErrorCode::CountMismatch,
                   "IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  if (h == 0 || w == 0) throw IdxError(IdxErrorCode::Truncated, "IDX images: zero image dimension");
  if (img.size() < 16 + n * h * w) throw IdxError(IdxErrorCode::Truncated, "IDX images: truncated payload");
  if (lab.size() < 8 + n) throw IdxError(IdxErrorCode::Truncated, "IDX labels: truncated payload");

  Corpus corpus;
  corpus.image = {1, h, w};
  corpus.items.reserve(n);
  std::uint32_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor px({1, h, w});
    for (std::size_t j = 0; j < h * w; ++j)
      px[j] = static_cast<float>(static_cast<unsigned char>(img[16 + i * h * w + j])) / 255.0f;
    const auto label = static_cast<std::uint32_t>(static_cast<unsigned char>(lab[8 + i]));
    max_label = std::max(max_label, label);
    corpus.items.push_back({std::move(px), label});
  }
  corpus.class_count = n ? max_label + 1 : 0;
  return corpus;
}

Corpus load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(slurp(images), slurp(labels));
}

void write_idx(const Corpus& corpus, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (corpus.image.channels != 1) throw DataError("write_idx: only single-channel corpora are supported");
  std::string img, lab;
  put_be32(img, 0x00000803u);
  put_be32(img, static_cast<std::uint32_t>(corpus.size()));
  put_be32(img, static_cast<std::uint32_t>(corpus.image.height));
  put_be32(img, static_cast<std::uint32_t>(corpus.image.width));
  put_be32(lab, 0x00000801u);
  put_be32(lab, static_cast<std::uint32_t>(corpus.size()));
  for (const auto& it : corpus.items) {
    if (it.label > 255) throw DataError("write_idx: label exceeds u8");
    for (float v : it.pixels.values()) img.push_back(static_cast<char>(static_cast<int>(quantize_u8(v) * 255.0f + 0.5f)));
    lab.push_back(static_cast<char>(it.label));
  }
  for (const auto& [path, bytes] : {std::pair{images, &img}, std::pair{labels, &lab}}) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IdxError(IdxErrorCode::Io, "cannot write " + path.string());
    f.write(bytes->data(), static_cast<std::streamsize>(bytes->size()));
  }
}

// ---------------------------------------------------------------------------
// Splits

PartitionMode parse_partition_mode(const std::string& s) {
  if (s == "iid") return PartitionMode::Iid;
  if (s == "dirichlet") return PartitionMode::Dirichlet;
  throw ConfigError("unknown partition mode '" + s + "' (expected iid or dirichlet)");
}

std::string to_string(PartitionMode m) { return m == PartitionMode::Iid ? "iid" : "dirichlet"; }

void PartitionSpec::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("partition: alpha must be > 0");
  if (clients < 1) throw ConfigError("partition: clients must be >= 1");
}

std::vector<std::vector<std::uint32_t>> split_tasks(std::size_t class_count, std::size_t n_tasks, std::uint64_t seed) {
  if (n_tasks == 0) throw ConfigError("split_tasks: n_tasks must be >= 1");
  if (class_count % n_tasks != 0)
    throw ConfigError("split_tasks: " + std::to_string(class_count) + " classes do not divide into " +
                      std::to_string(n_tasks) + " tasks (remainder " + std::to_string(class_count % n_tasks) + ")");
  std::vector<std::uint32_t> perm(class_count);
  std::iota(perm.begin(), perm.end(), 0u);
  Rng rng = Rng::keyed(seed, {Rng::purpose("split_tasks")});
  rng.shuffle(perm);
  const std::size_t per = class_count / n_tasks;
  std::vector<std::vector<std::uint32_t>> out(n_tasks);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    out[t].assign(perm.begin() + static_cast<std::ptrdiff_t>(t * per),
                  perm.begin() + static_cast<std::ptrdiff_t>((t + 1) * per));
    std::sort(out[t].begin(), out[t].end());
  }
  return out;
}

std::vector<std::vector<std::uint32_t>> split_tasks(const Corpus& corpus, std::size_t n_tasks, std::uint64_t seed) {
  return split_tasks(corpus.class_count, n_tasks, seed);
}

std::vector<double> dirichlet_proportions(const PartitionSpec& spec, std::uint32_t label) {
  spec.validate();
  Rng rng = Rng::keyed(spec.seed, {Rng::purpose("dirichlet"), label});
  std::vector<double> p(spec.clients);
  double total = 0.0;
  for (auto& v : p) {
    v = rng.gamma(spec.alpha);
    total += v;
  }
  if (!(total > 0.0)) {
    // All draws underflowed (tiny alpha); fall back to one-hot on a random client.
    std::fill(p.begin(), p.end(), 0.0);
    p[rng.below(spec.clients)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t n) {
  const std::size_t k = proportions.size();
  std::vector<std::size_t> counts(k);
  std::vector<std::pair<double, std::size_t>> frac(k);
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const double exact = proportions[j] * static_cast<double>(n);
    counts[j] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[j];
    frac[j] = {exact - static_cast<double>(counts[j]), j};
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) counts[frac[r % k].second] += 1;
  return counts;
}

std::vector<std::vector<std::size_t>> partition(const Corpus& corpus, std::span<const std::size_t> indices,
                                                const PartitionSpec& spec) {
  spec.validate();
  std::map<std::uint32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i : indices) by_class[corpus.items.at(i).label].push_back(i);

  std::vector<std::vector<std::size_t>> shards(spec.clients);
  for (auto& [label, members] : by_class) {
    Rng rng = Rng::keyed(spec.seed, {Rng::purpose("partition"), label, members.size()});
    rng.shuffle(members);
    if (spec.mode == PartitionMode::Iid) {
      for (std::size_t j = 0; j < members.size(); ++j) shards[j % spec.clients].push_back(members[j]);
      continue;
    }
    const auto counts = largest_remainder(dirichlet_proportions(spec, label), members.size());
    std::size_t pos = 0;
    for (std::size_t c = 0; c < spec.clients; ++c)
      for (std::size_t j = 0; j < counts[c]; ++j) shards[c].push_back(members[pos++]);
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  return shards;
}

HoldoutSplit holdout_split(const Corpus& corpus, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("holdout_split: test_fraction must be in (0,1), got " + std::to_string(test_fraction));
  HoldoutSplit out;
  for (std::uint32_t label = 0; label < corpus.class_count; ++label) {
    auto members = corpus.indices_of(label);
    if (members.size() < 2)
      throw DataError("holdout_split: class " + std::to_string(label) + " has " + std::to_string(members.size()) +
                      " samples (need >= 2)");
    Rng rng = Rng::keyed(seed, {Rng::purpose("holdout"), label});
    rng.shuffle(members);
    auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(members.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
    out.test.insert(out.test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
    out.train.insert(out.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

std::size_t TaskSequencePlan::task_of(std::uint32_t label) const {
  for (std::size_t t = 0; t < label_sets.size(); ++t)
    if (std::binary_search(label_sets[t].begin(), label_sets[t].end(), label)) return t;
  throw DataError("plan: class " + std::to_string(label) + " belongs to no task");
}

TaskSequencePlan make_plan(const Corpus& corpus, std::size_t n_tasks, const PartitionSpec& spec,
                           double test_fraction, std::uint64_t seed) {
  spec.validate();
  TaskSequencePlan plan;
  plan.label_sets = split_tasks(corpus, n_tasks, seed);
  auto split = holdout_split(corpus, test_fraction, seed);
  plan.train = std::move(split.train);
  plan.test = std::move(split.test);
  for (std::size_t i : plan.test) plan.test_by_class[corpus.items[i].label].push_back(i);

  for (const auto& labels : plan.label_sets) {
    const std::set<std::uint32_t> in_task(labels.begin(), labels.end());
    std::vector<std::size_t> task_train, task_test;
    for (std::size_t i : plan.train)
      if (in_task.count(corpus.items[i].label)) task_train.push_back(i);
    for (std::size_t i : plan.test)
      if (in_task.count(corpus.items[i].label)) task_test.push_back(i);
    plan.shards.push_back(partition(corpus, task_train, spec));
    plan.local_test.push_back(partition(corpus, task_test, spec));
  }
  return plan;
}

void validate_plan(const TaskSequencePlan& plan, const Corpus& corpus) {
  std::set<std::uint32_t> seen;
  for (const auto& labels : plan.label_sets)
    for (auto l : labels)
      if (!seen.insert(l).second) throw DataError("plan: class " + std::to_string(l) + " appears in two tasks");
  if (seen.size() != corpus.class_count) throw DataError("plan: task label sets do not cover every class");

  const std::set<std::size_t> test(plan.test.begin(), plan.test.end());
  for (std::size_t t = 0; t < plan.n_tasks(); ++t) {
    const std::set<std::uint32_t> in_task(plan.label_sets[t].begin(), plan.label_sets[t].end());
    std::multiset<std::size_t> shard_union;
    for (const auto& shard : plan.shards[t])
      for (std::size_t i : shard) {
        if (test.count(i)) throw DataError("plan: test index " + std::to_string(i) + " appears in a train shard");
        if (!in_task.count(corpus.items.at(i).label)) throw DataError("plan: shard holds a class outside its task");
        shard_union.insert(i);
      }
    std::multiset<std::size_t> expected;
    for (std::size_t i : plan.train)
      if (in_task.count(corpus.items[i].label)) expected.insert(i);
    if (shard_union != expected)
      throw DataError("plan: task " + std::to_string(t) + " shards do not cover its train split exactly once");
  }
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::filesystem::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3) throw ShapeError("write_pgm: expected (C,H,W), got " + shape_str(pixels.shape()));
  const std::size_t c = pixels.shape()[0], h = pixels.shape()[1], w = pixels.shape()[2];
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << "P5\n" << w << ' ' << c * h << "\n255\n";
  std::string bytes(pixels.size(), '\0');
  for (std::size_t i = 0; i < pixels.size(); ++i)
    bytes[i] = static_cast<char>(static_cast<int>(quantize_u8(pixels[i]) * 255.0f + 0.5f));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_pgm(const std::filesystem::path& path, const ImageShape& expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact(path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  f.get();
  if (magic != "P5" || maxval != 255) throw DataError("read_pgm: " + path.string() + " is not an 8-bit P5 file");
  if (w != expected.width || h != expected.channels * expected.height)
    throw DataError("read_pgm: " + path.string() + " has unexpected size");
  std::string bytes(w * h, '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw DataError("read_pgm: truncated " + path.string());
  Tensor out(expected.as_shape());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
  return out;
}

void dump_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  manifest << "filename,label\n";
  char name[32];
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::snprintf(name, sizeof name, "%06zu.pgm", i);
    write_pgm(dir / name, corpus.items[i].pixels);
    manifest << name << ',' << corpus.items[i].label << '\n';
  }
}

Corpus read_corpus_dump(const std::filesystem::path& dir, const ImageShape& image, std::size_t class_count) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw MissingArtifact((dir / "manifest.csv").string());
  Corpus corpus;
  corpus.image = image;
  corpus.class_count = class_count;
  std::string line;
  std::getline(manifest, line);
  if (line != "filename,label") throw DataError("corpus manifest: bad header in " + dir.string());
  std::size_t lineno = 1;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError("corpus manifest line " + std::to_string(lineno) + ": missing label");
    std::uint32_t label = 0;
    try {
      label = static_cast<std::uint32_t>(std::stoul(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw DataError("corpus manifest line " + std::to_string(lineno) + ": bad label");
    }
    if (label >= class_count) throw DataError("corpus manifest line " + std::to_string(lineno) + ": label out of range");
    corpus.items.push_back({read_pgm(dir / line.substr(0, comma), image), label});
  }
  return corpus;
}

}  // namespace dddr
