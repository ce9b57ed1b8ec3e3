#include "ior/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "ior/config.hpp"

namespace ior {

namespace {

using nlohmann::json;

const char* dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: throw std::runtime_error("checkpoint: unsupported tensor dtype");
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "f32") return torch::kFloat32;
  if (tag == "f64") return torch::kFloat64;
  if (tag == "i64") return torch::kInt64;
  throw std::runtime_error("checkpoint: unknown dtype tag \"" + tag + "\"");
}

struct NamedTensor {
  std::string name;
  torch::Tensor tensor;
};

std::vector<NamedTensor> collect_tensors(const DetectorState& state) {
  std::vector<NamedTensor> out;
  for (const auto& item : state.model->named_parameters())
    out.push_back({item.key(), item.value()});
  for (const auto& item : state.model->named_buffers())
    out.push_back({item.key(), item.value()});
  return out;
}

}  // namespace

void save_checkpoint(const DetectorState& state, const std::string& path) {
  auto tensors = collect_tensors(state);

  json manifest;
  manifest["config"] = detector_config_to_json(state.config);
  manifest["class_registry"] = state.class_registry;
  std::vector<int> frozen;
  for (const auto& bn : state.model->bn_layers()) frozen.push_back(bn->frozen() ? 1 : 0);
  manifest["frozen_bn"] = frozen;

  std::vector<torch::Tensor> blobs;
  uint64_t offset = 0;
  json table = json::array();
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const uint64_t bytes = static_cast<uint64_t>(t.numel()) * t.element_size();
    table.push_back({{"name", name},
                     {"dtype", dtype_tag(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", offset},
                     {"bytes", bytes}});
    blobs.push_back(t);
    offset += bytes;
  }
  manifest["tensors"] = std::move(table);

  const std::string header = std::string(kCheckpointMagic) + "\n";
  const std::string body = manifest.dump();
  const uint64_t body_len = body.size();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    char len_le[8];
    for (int i = 0; i < 8; ++i) len_le[i] = static_cast<char>((body_len >> (8 * i)) & 0xff);
    out.write(len_le, 8);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    for (const auto& t : blobs) {
      out.write(static_cast<const char*>(t.const_data_ptr()),
                static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw std::runtime_error("checkpoint: short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: cannot move " + tmp + " into place");
}

DetectorState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);

  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic)
    throw std::runtime_error("checkpoint: " + path + " is not an " +
                             std::string(kCheckpointMagic) + " file");

  char len_le[8];
  in.read(len_le, 8);
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
  uint64_t body_len = 0;
  for (int i = 0; i < 8; ++i)
    body_len |= static_cast<uint64_t>(static_cast<unsigned char>(len_le[i])) << (8 * i);

  std::string body(body_len, '\0');
  in.read(body.data(), static_cast<std::streamsize>(body_len));
  if (!in) throw std::runtime_error("checkpoint: truncated manifest in " + path);

  json manifest;
  try {
    manifest = json::parse(body);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: bad manifest in " + path + ": " + e.what());
  }

  auto config = detector_config_from_json(manifest.at("config"));
  auto registry = manifest.at("class_registry").get<std::vector<int64_t>>();
  auto state = make_detector(config, registry, /*seed=*/0);

  auto params = state.model->named_parameters();
  auto buffers = state.model->named_buffers();
  torch::NoGradGuard guard;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offset = entry.at("offset").get<uint64_t>();
    const auto bytes = entry.at("bytes").get<uint64_t>();

    torch::Tensor* dst = params.find(name);
    if (dst == nullptr) dst = buffers.find(name);
    if (dst == nullptr)
      throw std::runtime_error("checkpoint: tensor \"" + name + "\" has no home in the model");
    if (dst->sizes().vec() != shape)
      throw std::runtime_error("checkpoint: shape mismatch for \"" + name + "\"");

    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (static_cast<uint64_t>(t.numel()) * t.element_size() != bytes)
      throw std::runtime_error("checkpoint: byte count mismatch for \"" + name + "\"");
    in.seekg(static_cast<std::streamoff>(std::string(kCheckpointMagic).size() + 1 + 8 +
                                         body_len + offset));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
    if (!in) throw std::runtime_error("checkpoint: truncated blob for \"" + name + "\"");
    dst->copy_(t.to(dst->scalar_type()));
  }

  auto frozen = manifest.at("frozen_bn").get<std::vector<int>>();
  auto& bns = state.model->bn_layers();
  if (frozen.size() != bns.size())
    throw std::runtime_error("checkpoint: frozen_bn length mismatch");
  for (size_t i = 0; i < bns.size(); ++i) bns[i]->set_frozen(frozen[i] != 0);

  state.model->eval();
  return state;
}

}  // namespace ior
