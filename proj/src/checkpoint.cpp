#include "attmask/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "attmask/error.hpp"

namespace attmask {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order, which must be little-endian");

using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::Float32 : Precision::Float64;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read " + path.string());
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_bytes(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  out.flush();
  if (!out) {
    throw IoError("write failed for " + path.string());
  }
}

// One named span of the blob.
template <typename T>
struct Entry {
  std::string group;
  std::string name;
  Shape shape;
  std::span<T> values;
};

// Every blob segment in canonical order. Spans alias the state, so the same
// list serves saving and loading.
template <typename T>
std::vector<Entry<T>> layout(TrainState<T>& state) {
  std::vector<Entry<T>> entries;
  const auto names = state.pair.student.names();
  for (const auto& name : names) {
    auto& t = state.pair.student.at(name);
    entries.push_back({"student", name, t.shape(), t.mutable_data()});
  }
  for (const auto& name : names) {
    auto& t = state.pair.teacher.at(name);
    entries.push_back({"teacher", name, t.shape(), t.mutable_data()});
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    entries.push_back({"adam_m", names[i], state.pair.student.at(names[i]).shape(),
                       state.optimizer.first_moment[i]});
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    entries.push_back({"adam_v", names[i], state.pair.student.at(names[i]).shape(),
                       state.optimizer.second_moment[i]});
  }
  entries.push_back({"center", "cls", {state.pair.cls_center.size()}, state.pair.cls_center});
  entries.push_back({"center", "patch", {state.pair.patch_center.size()}, state.pair.patch_center});
  return entries;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const TrainState<T>& state,
                     const RunConfig& config, std::int64_t epoch) {
  auto& mutable_state = const_cast<TrainState<T>&>(state);  // layout() only reads here
  const auto entries = layout(mutable_state);
  json index = json::array();
  std::vector<T> blob;
  for (const auto& e : entries) {
    index.push_back({{"group", e.group},
                     {"name", e.name},
                     {"shape", e.shape},
                     {"offset", blob.size() * sizeof(T)},
                     {"count", e.values.size()}});
    blob.insert(blob.end(), e.values.begin(), e.values.end());
  }
  const json manifest{
      {"format", "attmask-checkpoint"},
      {"version", 1},
      {"config_hash", hex64(config_hash(config))},
      {"config", json::parse(dump_config(config))},
      {"dtype", precision_name(precision_of<T>())},
      {"step", state.step},
      {"epoch", epoch},
      {"optimizer",
       {{"step", state.optimizer.step},
        {"beta1", state.optimizer.hyper.beta1},
        {"beta2", state.optimizer.hyper.beta2},
        {"eps", state.optimizer.hyper.eps}}},
      // Every random stream is derived from (seed, step) so the step alone
      // restores the generators.
      {"rng", {{"generator", "philox4x32-10"}, {"seed", config.seed}, {"step", state.step}}},
      {"tensors", index},
      {"blob_bytes", blob.size() * sizeof(T)},
  };
  std::filesystem::create_directories(dir);
  write_bytes(dir / kParamsFile, blob.data(), blob.size() * sizeof(T));
  const auto text = manifest.dump(2) + "\n";
  write_bytes(dir / kManifestFile, text.data(), text.size());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  const auto path = dir / kManifestFile;
  json manifest;
  try {
    manifest = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "attmask-checkpoint" || manifest.at("version") != 1) {
      throw FormatError(path.string() + ": not an attmask checkpoint manifest");
    }
    CheckpointInfo info;
    info.config_hash = std::stoull(manifest.at("config_hash").get<std::string>(), nullptr, 16);
    info.step = manifest.at("step").get<std::int64_t>();
    info.epoch = manifest.at("epoch").get<std::int64_t>();
    info.precision = manifest.at("dtype") == "float64" ? Precision::Float64 : Precision::Float32;
    info.config_json = manifest.at("config").dump(2);
    return info;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& dir, const RunConfig& config) {
  const auto info = read_checkpoint_info(dir);
  if (info.config_hash != config_hash(config)) {
    throw StateError("checkpoint " + dir.string() + " was written under config hash " +
                     hex64(info.config_hash) + ", current config hashes to " +
                     hex64(config_hash(config)) + "; refusing to resume");
  }
  if (info.precision != precision_of<T>()) {
    throw StateError("checkpoint " + dir.string() + " holds " +
                     std::string(precision_name(info.precision)) + " values");
  }
  const auto manifest = json::parse(read_text(dir / kManifestFile));
  const auto bytes = read_text(dir / kParamsFile);

  auto state = TrainState<T>::initialize(config.encoder, Rng(0));
  const auto entries = layout(state);
  const auto& index = manifest.at("tensors");
  if (index.size() != entries.size()) {
    throw FormatError(dir.string() + ": manifest lists " + std::to_string(index.size()) +
                      " tensors, model has " + std::to_string(entries.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto& rec = index[i];
    const auto offset = rec.at("offset").get<std::size_t>();
    const auto count = rec.at("count").get<std::size_t>();
    if (rec.at("group") != e.group || rec.at("name") != e.name ||
        rec.at("shape").get<Shape>() != e.shape || count != e.values.size() ||
        offset != expected_offset) {
      throw FormatError(dir.string() + ": tensor entry " + std::to_string(i) + " (" +
                        rec.at("group").get<std::string>() + "/" +
                        rec.at("name").get<std::string>() + ") does not match the model");
    }
    if (offset + count * sizeof(T) > bytes.size()) {
      throw FormatError(dir.string() + ": params.bin truncated at byte " + std::to_string(bytes.size()));
    }
    std::memcpy(e.values.data(), bytes.data() + offset, count * sizeof(T));
    expected_offset += count * sizeof(T);
  }
  if (expected_offset != bytes.size()) {
    throw FormatError(dir.string() + ": params.bin has " + std::to_string(bytes.size() - expected_offset) +
                      " trailing bytes");
  }
  state.step = manifest.at("step").get<std::int64_t>();
  state.optimizer.step = manifest.at("optimizer").at("step").get<std::int64_t>();
  return state;
}

template void save_checkpoint<float>(const std::filesystem::path&, const TrainState<float>&,
                                     const RunConfig&, std::int64_t);
template void save_checkpoint<double>(const std::filesystem::path&, const TrainState<double>&,
                                      const RunConfig&, std::int64_t);
template TrainState<float> load_checkpoint<float>(const std::filesystem::path&, const RunConfig&);
template TrainState<double> load_checkpoint<double>(const std::filesystem::path&, const RunConfig&);

}  // namespace attmask
