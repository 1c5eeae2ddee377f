#include "dddr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dddr {
namespace {

constexpr char kMagic[8] = {'D', 'D', 'D', 'R', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

bool has_space(const std::string& s) { return s.find_first_of(" \t\r\n") != std::string::npos; }

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream meta;
  meta << "count " << ckpt.params.size() << '\n';
  for (const auto& [name, t] : ckpt.params) {
    if (name.empty() || has_space(name)) throw DataError("checkpoint: invalid tensor name '" + name + "'");
    meta << "tensor " << name << ' ';
    for (std::size_t i = 0; i < t.shape().size(); ++i) meta << (i ? "x" : "") << t.shape()[i];
    meta << '\n';
  }
  for (const auto& [k, v] : ckpt.attrs) {
    if (k.empty() || has_space(k) || v.find('\n') != std::string::npos)
      throw DataError("checkpoint: invalid attribute '" + k + "'");
    meta << "attr " << k << ' ' << v << '\n';
  }
  const std::string text = meta.str();

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [_, t] : ckpt.params) {
    for (float f : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  auto fail = [&](const std::string& why) { return DataError("checkpoint " + origin + ": " + why); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw fail("bad magic");
  const std::uint32_t version = get_u32(bytes, 8);
  if (version != kCheckpointVersion) throw fail("unsupported version " + std::to_string(version));
  const std::uint32_t meta_len = get_u32(bytes, 12);
  if (bytes.size() < 16 + static_cast<std::size_t>(meta_len)) throw fail("truncated metadata");

  Checkpoint ckpt;
  std::vector<std::pair<std::string, Shape>> layout;
  std::size_t declared = 0;
  std::istringstream meta(bytes.substr(16, meta_len));
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "count") {
      ls >> declared;
    } else if (kind == "tensor") {
      std::string name, dims;
      ls >> name >> dims;
      Shape shape;
      std::istringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, 'x')) {
        try {
          shape.push_back(static_cast<std::size_t>(std::stoull(d)));
        } catch (const std::exception&) {
          throw fail("bad shape '" + dims + "' for tensor " + name);
        }
      }
      layout.emplace_back(name, shape);
    } else if (kind == "attr") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.attrs[key] = value;
    } else {
      throw fail("unknown metadata line '" + line + "'");
    }
  }
  if (declared != layout.size()) throw fail("tensor count mismatch");

  std::size_t pos = 16 + meta_len;
  for (const auto& [name, shape] : layout) {
    const std::size_t n = shape_numel(shape);
    if (bytes.size() < pos + 4 * n) throw fail("truncated payload at tensor " + name);
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_u32(bytes, pos + 4 * i));
    pos += 4 * n;
    ckpt.params.set(name, Tensor(shape, std::move(data)));
  }
  if (pos != bytes.size()) throw fail("trailing bytes after payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact(path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

}  // namespace dddr
