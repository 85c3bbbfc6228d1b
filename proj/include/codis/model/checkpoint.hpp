#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codis/model/codis.hpp"

namespace codis::model {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Blob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Binary container: "CODISCKP", uint32 version, uint64 header length, JSON
/// header (metadata plus the blob table), then the blobs as raw doubles.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<Blob> blobs;

  const Blob* find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const Checkpoint& ckp);
Checkpoint read_checkpoint(const std::string& path);

/// Model parameters as blobs; meta carries the model config and seed.
Checkpoint make_checkpoint(const Codis& model, std::uint64_t seed);
std::unique_ptr<Codis> load_model(const Checkpoint& ckp);

}  // namespace codis::model
