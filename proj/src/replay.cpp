#include "dddr/replay.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dddr {

namespace fs = std::filesystem;

std::vector<LabeledImage> generate_class_samples(const EmbeddingStore& store, std::uint32_t cls, std::size_t n,
                                                 const DiffusionModel& model, std::uint64_t seed,
                                                 const ImageShape& image) {
  if (!store.contains(cls)) throw DataError("replay: class " + std::to_string(cls) + " has no frozen embedding");
  if (model.autoencoder.data_dim() != image.numel())
    throw ShapeError("replay: generator emits " + std::to_string(model.autoencoder.data_dim()) + " values, image needs " +
                     std::to_string(image.numel()));
  std::vector<LabeledImage> out;
  if (n == 0) return out;
  Rng rng = Rng::keyed(seed, {Rng::purpose("replay"), cls});
  const Tensor rows = sample(model, store.at(cls).v, n, rng);
  const std::size_t d = image.numel();
  out.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    Tensor px(image.as_shape());
    for (std::size_t i = 0; i < d; ++i) px[i] = quantize_u8(rows[r * d + i]);
    out.push_back({std::move(px), cls});
  }
  return out;
}

std::size_t ReplayCache::size() const {
  std::size_t n = 0;
  for (const auto& [_, v] : by_class) n += v.size();
  return n;
}

std::vector<std::uint32_t> ReplayCache::classes() const {
  std::vector<std::uint32_t> out;
  for (const auto& [c, _] : by_class) out.push_back(c);
  return out;
}

void ReplayCache::validate() const {
  for (const auto& [cls, items] : by_class) {
    if (items.size() != per_class)
      throw DataError("replay cache: class " + std::to_string(cls) + " has " + std::to_string(items.size()) +
                      " images, metadata says " + std::to_string(per_class));
    for (const auto& it : items) {
      if (it.label != cls) throw DataError("replay cache: image labelled " + std::to_string(it.label) + " under class " + std::to_string(cls));
      if (it.pixels.shape() != image.as_shape()) throw DataError("replay cache: image shape mismatch");
    }
  }
}

Corpus ReplayCache::as_corpus(std::size_t class_count) const {
  Corpus c;
  c.image = image;
  c.class_count = class_count;
  for (const auto& [cls, items] : by_class) {
    if (cls >= class_count) throw DataError("replay cache: class " + std::to_string(cls) + " outside label space");
    c.items.insert(c.items.end(), items.begin(), items.end());
  }
  return c;
}

ReplayCache make_replay_cache(const EmbeddingStore& store, std::span<const std::uint32_t> classes, std::size_t per_class,
                              const DiffusionModel& model, std::uint64_t seed, const ImageShape& image) {
  ReplayCache cache;
  cache.seed = seed;
  cache.per_class = per_class;
  cache.sampler_steps = model.schedule.steps();
  cache.image = image;
  for (std::uint32_t cls : classes) cache.by_class[cls] = generate_class_samples(store, cls, per_class, model, seed, image);
  return cache;
}

ReplaySets build_replay_sets(const EmbeddingStore& store, std::span<const std::uint32_t> past,
                             std::span<const std::uint32_t> current, const ReplayCounts& counts,
                             const DiffusionModel& model, std::uint64_t seed, const ImageShape& image) {
  ReplaySets sets;
  sets.past = make_replay_cache(store, past, counts.past, model, Rng::keyed(seed, {Rng::purpose("past")}).next_u64(), image);
  sets.current =
      make_replay_cache(store, current, counts.current, model, Rng::keyed(seed, {Rng::purpose("current")}).next_u64(), image);
  return sets;
}

// ---------------------------------------------------------------------------
// Cache files

namespace {

constexpr const char* kManifestHeader = "filename,label,seed,class";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void write_replay_cache(const ReplayCache& cache, const fs::path& dir) {
  cache.validate();
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.csv").string());
  manifest << kManifestHeader << '\n';
  std::uint64_t h = fnv1a(std::string(kManifestHeader));
  for (const auto& [cls, items] : cache.by_class) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      char name[48];
      std::snprintf(name, sizeof name, "c%03u_%05zu.pgm", cls, i);
      write_pgm(dir / name, items[i].pixels);
      const std::string row =
          std::string(name) + "," + std::to_string(items[i].label) + "," + std::to_string(cache.seed) + "," + std::to_string(cls);
      h = fnv1a(row, h);
      manifest << row << '\n';
    }
  }
  if (!cache.empty()) manifest << "#checksum," << hex64(h) << '\n';

  nlohmann::ordered_json meta;
  meta["seed"] = cache.seed;
  meta["per_class"] = cache.per_class;
  meta["sampler"] = {{"kind", "ancestral"}, {"steps", cache.sampler_steps}};
  meta["image"] = {cache.image.channels, cache.image.height, cache.image.width};
  std::ofstream(dir / "cache.json", std::ios::trunc) << meta.dump(2) << '\n';
}

ReplayCache read_replay_cache(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.csv";
  const fs::path jpath = dir / "cache.json";
  std::ifstream meta_f(jpath);
  if (!meta_f) throw MissingArtifact(jpath.string());
  ReplayCache cache;
  try {
    const auto meta = nlohmann::json::parse(meta_f);
    cache.seed = meta.at("seed").get<std::uint64_t>();
    cache.per_class = meta.at("per_class").get<std::size_t>();
    cache.sampler_steps = meta.at("sampler").at("steps").get<std::size_t>();
    const auto img = meta.at("image");
    cache.image = {img.at(0).get<std::size_t>(), img.at(1).get<std::size_t>(), img.at(2).get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(jpath.string() + ": " + e.what());
  }

  std::ifstream f(mpath);
  if (!f) throw MissingArtifact(mpath.string());
  std::string line;
  std::size_t lineno = 1;
  auto fail = [&](const std::string& why) { return DataError(mpath.string() + ":" + std::to_string(lineno) + ": " + why); };
  if (!std::getline(f, line) || line != kManifestHeader) throw fail("expected header '" + std::string(kManifestHeader) + "'");
  std::uint64_t h = fnv1a(std::string(kManifestHeader));
  bool have_checksum = false;
  std::size_t rows = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (have_checksum) throw fail("content after checksum line");
    if (line.rfind("#checksum,", 0) == 0) {
      if (line.substr(10) != hex64(h)) throw fail("checksum mismatch");
      have_checksum = true;
      continue;
    }
    const auto cells = split_csv(line);
    if (cells.size() != 4) throw fail("expected 4 columns, got " + std::to_string(cells.size()));
    std::uint32_t label = 0, cls = 0;
    std::uint64_t seed = 0;
    try {
      std::size_t pos = 0;
      label = static_cast<std::uint32_t>(std::stoul(cells[1], &pos));
      if (pos != cells[1].size()) throw std::invalid_argument("label");
      seed = std::stoull(cells[2], &pos);
      if (pos != cells[2].size()) throw std::invalid_argument("seed");
      cls = static_cast<std::uint32_t>(std::stoul(cells[3], &pos));
      if (pos != cells[3].size()) throw std::invalid_argument("class");
    } catch (const std::exception&) {
      throw fail("malformed row '" + line + "'");
    }
    if (seed != cache.seed) throw fail("seed " + std::to_string(seed) + " does not match cache seed");
    h = fnv1a(line, h);
    cache.by_class[cls].push_back({read_pgm(dir / cells[0], cache.image), label});
    ++rows;
  }
  if (rows > 0 && !have_checksum) throw fail("missing checksum line");
  cache.validate();
  return cache;
}

}  // namespace dddr
