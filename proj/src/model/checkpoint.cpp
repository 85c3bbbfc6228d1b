#include "codis/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace codis::model {

static_assert(std::endian::native == std::endian::little, "checkpoints are written little-endian");

namespace {
constexpr char kMagic[8] = {'C', 'O', 'D', 'I', 'S', 'C', 'K', 'P'};
}

const Blob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckp) {
  nlohmann::json header;
  header["meta"] = ckp.meta;
  header["blobs"] = nlohmann::json::array();
  for (const auto& b : ckp.blobs) {
    if (shape_size(b.shape) != b.values.size()) throw CheckpointError("blob " + b.name + " has inconsistent shape");
    header["blobs"].push_back({{"name", b.name}, {"shape", b.shape}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& b : ckp.blobs) {
    out.write(reinterpret_cast<const char*>(b.values.data()),
              static_cast<std::streamsize>(b.values.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError(path + " is not a checkpoint");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw CheckpointError("truncated checkpoint header in " + path);
  const auto header = nlohmann::json::parse(text);
  Checkpoint ckp;
  ckp.meta = header.at("meta");
  for (const auto& entry : header.at("blobs")) {
    Blob b;
    b.name = entry.at("name").get<std::string>();
    b.shape = entry.at("shape").get<Shape>();
    b.values.resize(shape_size(b.shape));
    in.read(reinterpret_cast<char*>(b.values.data()), static_cast<std::streamsize>(b.values.size() * sizeof(double)));
    if (!in) throw CheckpointError("truncated blob " + b.name + " in " + path);
    ckp.blobs.push_back(std::move(b));
  }
  return ckp;
}

Checkpoint make_checkpoint(const Codis& model, std::uint64_t seed) {
  Checkpoint ckp;
  const auto& c = model.config();
  ckp.meta = {{"model", to_json(c)},
              {"seed", seed},
              {"dims", {{"L", c.num_items}, {"h", c.hidden}, {"T", c.max_len}, {"d", c.latent}}},
              {"experts", {{"N", c.experts}, {"R", c.shared_experts}, {"K", c.top_k}}}};
  for (const auto& e : model.parameters().entries()) {
    const auto& v = e.tensor.values();
    ckp.blobs.push_back({"param." + e.name, e.tensor.shape(), std::vector<double>(v.begin(), v.end())});
  }
  return ckp;
}

std::unique_ptr<Codis> load_model(const Checkpoint& ckp) {
  const auto config = model_config_from_json(ckp.meta.at("model"));
  auto model = std::make_unique<Codis>(config, ckp.meta.value("seed", std::uint64_t{0}));
  for (auto& e : model->parameters().entries()) {
    const Blob* b = ckp.find("param." + e.name);
    if (!b) throw CheckpointError("checkpoint lacks parameter " + e.name);
    if (b->shape != e.tensor.shape()) throw CheckpointError("shape mismatch for parameter " + e.name);
    auto dst = e.tensor.mutable_values();
    std::copy(b->values.begin(), b->values.end(), dst.begin());
  }
  return model;
}

}  // namespace codis::model
