#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <regex>

#include "carry/serialize.hpp"
#include "carry/training.hpp"

namespace carry::training {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'R', 'R', 'Y', 'C', 'K', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_floats(std::ostream& os, const Tensor<float>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.ptr()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
  } else {
    for (float f : t.data()) {
      auto u = std::bit_cast<std::uint32_t>(f);
      unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                            static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  }
}

Tensor<float> read_floats(std::istream& is, const Shape& shape, const std::string& name) {
  Tensor<float> t(shape);
  std::vector<unsigned char> raw(t.size() * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw CheckpointError("truncated blob for tensor " + name);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::uint32_t u = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                            (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    t[i] = std::bit_cast<float>(u);
  }
  return t;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& t = ck.params.at(i);
    tensors.push_back({{"name", ck.params.name(i)}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * 4;
  }
  json header = {{"format", "carry-checkpoint"},
                 {"version", 1},
                 {"config", to_json(ck.config)},
                 {"epoch", ck.epoch},
                 {"seed", ck.seed},
                 {"data_width", ck.data_width},
                 {"rng_cursors", ck.rng_cursors},
                 {"tensors", tensors},
                 {"endianness", "little"},
                 {"dtype", "float32"}};
  if (ck.optimizer) {
    header["optimizer"] = {{"config", to_json(ck.optimizer->config)},
                           {"step", ck.optimizer->step},
                           {"offset", offset}};
  }
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    const std::string h = header.dump();
    os.write(kMagic, 8);
    write_u64(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (std::size_t i = 0; i < ck.params.size(); ++i) write_floats(os, ck.params.at(i));
    if (ck.optimizer) {
      for (const auto& m : ck.optimizer->m) write_floats(os, m);
      for (const auto& v : ck.optimizer->v) write_floats(os, v);
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint file");
  const auto len = read_u64(is);
  std::string h(len, '\0');
  if (!is.read(h.data(), static_cast<std::streamsize>(len)))
    throw CheckpointError("truncated checkpoint manifest");
  const json header = json::parse(h);

  Checkpoint ck;
  ck.config = model_config_from_json(header.at("config"));
  ck.epoch = header.at("epoch").get<int>();
  ck.seed = header.at("seed").get<std::uint64_t>();
  ck.data_width = header.value("data_width", ck.config.width);
  ck.rng_cursors = header.at("rng_cursors").get<std::map<std::string, std::uint64_t>>();

  const auto layout = model::parameter_layout(ck.config);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != layout.size())
    throw CheckpointError("checkpoint has " + std::to_string(tensors.size()) +
                          " tensors, config expects " + std::to_string(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto name = tensors[i].at("name").get<std::string>();
    const auto shape = tensors[i].at("shape").get<Shape>();
    if (name != layout[i].first || shape != layout[i].second)
      throw CheckpointError("tensor " + std::to_string(i) + " is " + name + shape_str(shape) +
                            ", expected " + layout[i].first + shape_str(layout[i].second));
    ck.params.add(name, read_floats(is, shape, name));
  }
  if (header.contains("optimizer")) {
    const auto& o = header.at("optimizer");
    OptimizerState<float> st;
    st.config = adamw_config_from_json(o.at("config"));
    st.step = o.at("step").get<std::uint64_t>();
    for (std::size_t i = 0; i < layout.size(); ++i)
      st.m.push_back(read_floats(is, layout[i].second, layout[i].first + ".m"));
    for (std::size_t i = 0; i < layout.size(); ++i)
      st.v.push_back(read_floats(is, layout[i].second, layout[i].first + ".v"));
    ck.optimizer = std::move(st);
  }
  return ck;
}

std::vector<std::pair<int, fs::path>> list_checkpoints(const fs::path& run_dir) {
  std::vector<std::pair<int, fs::path>> out;
  const auto dir = run_dir / "ckpt";
  if (!fs::is_directory(dir)) return out;
  static const std::regex re(R"(epoch_(\d+)\.bin)");
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = e.path().filename().string();
    if (std::regex_match(name, m, re)) out.emplace_back(std::stoi(m[1].str()), e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace carry::training
