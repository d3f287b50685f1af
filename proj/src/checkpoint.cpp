#include "fsfnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fsfnet/serde.hpp"

namespace fsfnet {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint8_t kKindParam = 0;
constexpr std::uint8_t kKindBuffer = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
  const char bytes[2] = {static_cast<char>(v & 0xff),
                         static_cast<char>((v >> 8) & 0xff)};
  os.write(bytes, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes, 4);
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char bytes[2];
  is.read(reinterpret_cast<char*>(bytes), 2);
  return static_cast<std::uint16_t>(bytes[0] | (bytes[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char bytes[4];
  is.read(reinterpret_cast<char*>(bytes), 4);
  return static_cast<std::uint32_t>(bytes[0]) |
         (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void put_f32_array(std::ostream& os, const float* data, std::int64_t count) {
  static_assert(std::endian::native == std::endian::little,
                "payloads are written via memcpy on a little-endian host");
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(count) * 4);
}

void get_f32_array(std::istream& is, float* data, std::int64_t count) {
  is.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(count) * 4);
}

void write_entry(std::ostream& os, const std::string& name, std::uint8_t kind,
                 const Tensor<float>& t) {
  if (name.size() > 0xffff) fail("checkpoint: name too long: " + name);
  put_u16(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(kind));
  put_u32(os, 4);
  const Shape& s = t.shape();
  for (int d : {s.n, s.h, s.w, s.c}) put_u32(os, static_cast<std::uint32_t>(d));
  put_f32_array(os, t.data(), t.numel());
}

struct Entry {
  std::string name;
  std::uint8_t kind = 0;
  Tensor<float> tensor;
};

Entry read_entry(std::istream& is, const std::string& path) {
  Entry e;
  const std::uint16_t name_len = get_u16(is);
  e.name.resize(name_len);
  is.read(e.name.data(), name_len);
  e.kind = static_cast<std::uint8_t>(is.get());
  const std::uint32_t ndim = get_u32(is);
  if (ndim != 4) {
    fail("checkpoint " + path + ": entry " + e.name + " has rank " +
         std::to_string(ndim) + ", expected 4");
  }
  int dims[4];
  for (int& d : dims) d = static_cast<int>(get_u32(is));
  e.tensor = Tensor<float>(Shape{dims[0], dims[1], dims[2], dims[3]});
  get_f32_array(is, e.tensor.data(), e.tensor.numel());
  if (!is) fail("checkpoint " + path + ": truncated while reading " + e.name);
  return e;
}

struct Header {
  CheckpointMeta meta;
  std::uint32_t entry_count = 0;
};

Header read_header(std::istream& is, const std::string& path) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    fail(path + " is not a checkpoint file");
  }
  const std::uint32_t manifest_len = get_u32(is);
  std::string manifest(manifest_len, '\0');
  is.read(manifest.data(), manifest_len);
  if (!is) fail("checkpoint " + path + ": truncated manifest");

  Header h;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(manifest);
    h.meta.config = j.at("config").get<ModelConfig>();
    h.meta.seed = j.at("seed").get<std::uint64_t>();
    h.meta.step = j.at("step").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail("checkpoint " + path + ": bad manifest: " + e.what());
  }
  h.entry_count = get_u32(is);
  return h;
}

}  // namespace

void save_checkpoint(const std::string& path, const FsfNet<float>& model,
                     std::int64_t step) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("cannot open " + path + " for writing");

  os.write(kMagic, 8);
  nlohmann::json manifest{{"format", "fsfnet-checkpoint"},
                          {"version", 1},
                          {"config", model.config()},
                          {"seed", model.seed()},
                          {"step", step}};
  const std::string text = manifest.dump();
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));

  const auto& store = model.params();
  put_u32(os, static_cast<std::uint32_t>(store.params().size() +
                                         store.buffers().size()));
  // std::map iteration gives both groups in sorted order; interleave them
  // into one globally sorted stream so readers can binary-search by name.
  auto p = store.params().begin();
  auto b = store.buffers().begin();
  while (p != store.params().end() || b != store.buffers().end()) {
    const bool take_param =
        b == store.buffers().end() ||
        (p != store.params().end() && p->first < b->first);
    if (take_param) {
      write_entry(os, p->first, kKindParam, p->second.val());
      ++p;
    } else {
      write_entry(os, b->first, kKindBuffer, *b->second);
      ++b;
    }
  }
  if (!os) fail("failed while writing " + path);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open " + path);
  return read_header(is, path).meta;
}

std::int64_t load_checkpoint_into(const std::string& path,
                                  FsfNet<float>& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open " + path);
  const Header h = read_header(is, path);

  nlohmann::json stored = h.meta.config;
  nlohmann::json current = model.config();
  if (stored != current) {
    fail("checkpoint " + path + " was written for config " + stored.dump() +
         ", not " + current.dump());
  }

  auto& store = model.params();
  std::size_t restored = 0;
  for (std::uint32_t i = 0; i < h.entry_count; ++i) {
    Entry e = read_entry(is, path);
    if (e.kind == kKindParam) {
      Tensor<float>& dst = store.param(e.name).mutable_val();
      if (dst.shape() != e.tensor.shape()) {
        fail("checkpoint " + path + ": " + e.name + " has shape " +
             e.tensor.shape().str() + ", model expects " + dst.shape().str());
      }
      dst = std::move(e.tensor);
    } else if (e.kind == kKindBuffer) {
      Tensor<float>& dst = store.buffer(e.name);
      if (dst.shape() != e.tensor.shape()) {
        fail("checkpoint " + path + ": " + e.name + " has shape " +
             e.tensor.shape().str() + ", model expects " + dst.shape().str());
      }
      dst = std::move(e.tensor);
    } else {
      fail("checkpoint " + path + ": unknown entry kind for " + e.name);
    }
    ++restored;
  }
  const std::size_t expected =
      store.params().size() + store.buffers().size();
  if (restored != expected) {
    fail("checkpoint " + path + " holds " + std::to_string(restored) +
         " tensors, model has " + std::to_string(expected));
  }
  return h.meta.step;
}

FsfNet<float> load_checkpoint(const std::string& path) {
  const CheckpointMeta meta = read_checkpoint_meta(path);
  FsfNet<float> model(meta.config, meta.seed);
  load_checkpoint_into(path, model);
  return model;
}

}  // namespace fsfnet
