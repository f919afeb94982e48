#include <bit>
#include <cstring>
#include <fstream>

#include "hicap/error.hpp"
#include "hicap/training.hpp"

namespace hicap::training {

namespace {

constexpr char kMagic[4] = {'H', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path, const char* what) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw DataError("checkpoint '" + path + "' is truncated while reading " + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::size_t epoch,
                     const nlohmann::json& metrics) {
  const nlohmann::json header = {{"config", model.config().to_json()},
                                 {"vocab", model.vocab().to_json()},
                                 {"vocab_hash", hex64(model.vocab().hash())},
                                 {"normalization", model.normalization().to_json()},
                                 {"epoch", epoch},
                                 {"metrics", metrics}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& entries = model.params().entries();
  put<std::uint64_t>(out, entries.size());
  for (const auto& [name, p] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = p->value.shape();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put<std::uint64_t>(out, d);
    for (double v : p->value.data()) put<double>(out, v);
  }
  if (!out) throw DataError("write failed for checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + p + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw DataError("'" + p + "' is not a checkpoint");
  const auto version = get<std::uint32_t>(in, p, "version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint '" + p + "' has format version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const auto header_len = get<std::uint64_t>(in, p, "header length");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::uint64_t>(in.gcount()) != header_len) throw DataError("checkpoint '" + p + "' header is truncated");

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    auto vocab = text::Vocabulary::from_json(header.at("vocab"));
    if (header.at("vocab_hash").get<std::string>() != hex64(vocab.hash())) {
      throw DataError("checkpoint '" + p + "': vocabulary hash mismatch");
    }
    const auto cfg = TrainConfig::from_json(header.at("config"));
    auto norm = data::NormalizationStats::from_json(header.at("normalization"));
    ck.model = Model::create(cfg, std::move(vocab), std::move(norm));
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.metrics = header.at("metrics");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + p + "' header: " + e.what());
  }

  const auto count = get<std::uint64_t>(in, p, "parameter count");
  std::map<std::string, nn::Tensor> values;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, p, "parameter name");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len)) throw DataError("checkpoint '" + p + "' is truncated");
    const auto ndim = get<std::uint32_t>(in, p, "parameter rank");
    nn::Shape shape(ndim);
    for (auto& d : shape) d = get<std::uint64_t>(in, p, "parameter shape");
    nn::Tensor t(shape);
    for (auto& v : t.storage()) v = get<double>(in, p, "parameter values");
    values.emplace(std::move(name), std::move(t));
  }
  if (values.size() != ck.model->params().entries().size()) {
    throw DataError("checkpoint '" + p + "' has " + std::to_string(values.size()) + " parameters, model expects " +
                    std::to_string(ck.model->params().entries().size()));
  }
  ck.model->restore(values);
  return ck;
}

}  // namespace hicap::training
