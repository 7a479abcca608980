#include "d2g/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "d2g/version.hpp"

D2G_NN_BEGIN
namespace nn {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'D', '2', 'G', 'C', 'K', 'P', 'T', '\0'};
const char* const kSections[] = {"params", "ema", "adam_m", "adam_v"};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const fs::path& file) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (in.gcount() != sizeof(T)) throw FormatError("truncated checkpoint " + file.string());
  return v;
}

std::vector<Buffer>& section(Checkpoint& c, int k) {
  switch (k) {
    case 0:
      return c.params;
    case 1:
      return c.ema;
    case 2:
      return c.adam_m;
    default:
      return c.adam_v;
  }
}

template <typename Stored>
Buffer read_array(std::istream& in, std::size_t n, const fs::path& file) {
  std::vector<Stored, AlignedAllocator<Stored>> raw(n);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(Stored)));
  if (in.gcount() != static_cast<std::streamsize>(n * sizeof(Stored)))
    throw FormatError("truncated checkpoint " + file.string());
  if constexpr (std::is_same_v<Stored, Scalar>) {
    return raw;
  } else {
    return Buffer(raw.begin(), raw.end());
  }
}

}  // namespace

void set_manifest(Checkpoint& c, const ParameterList& params) {
  c.names.clear();
  c.shapes.clear();
  for (const auto& p : params) {
    c.names.push_back(p.name);
    c.shapes.push_back(p.tensor.shape());
  }
}

std::unique_ptr<Model> Checkpoint::build_model(bool use_ema) const {
  auto m = make_model(model, 0);
  const ParameterList p = m->parameters();
  if (p.size() != names.size()) throw FormatError("checkpoint does not match its model configuration");
  for (std::size_t k = 0; k < p.size(); ++k)
    if (p[k].name != names[k] || p[k].tensor.shape() != shapes[k])
      throw FormatError("checkpoint tensor " + names[k] + " does not match the model");
  restore(p, use_ema ? ema : params);
  return m;
}

void save_checkpoint(const Checkpoint& c, const fs::path& file) {
  static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t k = 0; k < c.names.size(); ++k) tensors.push_back({{"name", c.names[k]}, {"shape", c.shapes[k]}});
  const nlohmann::json header = {{"format", "d2g-checkpoint"},
                                 {"version", kCheckpointVersion},
                                 {"software", {{"version", kVersion}, {"git", kGitDescribe}}},
                                 {"dtype", kScalarName},
                                 {"model", to_json(c.model)},
                                 {"ablation", c.model.ablation},
                                 {"train", to_json(c.train)},
                                 {"data", c.data},
                                 {"info", c.info},
                                 {"step", c.step},
                                 {"val_loss", c.val_loss},
                                 {"adam_steps", c.adam_steps},
                                 {"ema_updates", c.ema_updates},
                                 {"tensors", tensors}};
  const std::string text = header.dump();
  for (int s = 0; s < 4; ++s) {
    const auto& v = section(const_cast<Checkpoint&>(c), s);
    if (v.size() != c.names.size()) throw ShapeError(std::string("checkpoint section ") + kSections[s] + " is incomplete");
    for (std::size_t k = 0; k < v.size(); ++k)
      if (static_cast<std::int64_t>(v[k].size()) != numel(c.shapes[k]))
        throw ShapeError("checkpoint tensor " + c.names[k] + " has the wrong size");
  }

  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, static_cast<std::uint32_t>(kCheckpointVersion));
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (int s = 0; s < 4; ++s)
      for (const auto& t : section(const_cast<Checkpoint&>(c), s))
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, file);
}

Checkpoint load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("missing checkpoint " + file.string());
  char magic[8] = {};
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError(file.string() + " is not a d2g checkpoint");
  const auto version = read_pod<std::uint32_t>(in, file);
  if (version != static_cast<std::uint32_t>(kCheckpointVersion))
    throw VersionError("checkpoint " + file.string() + " has format version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));
  const auto length = read_pod<std::uint64_t>(in, file);
  if (length > (std::uint64_t{1} << 30)) throw FormatError("corrupt checkpoint header in " + file.string());
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (in.gcount() != static_cast<std::streamsize>(length)) throw FormatError("truncated checkpoint " + file.string());

  Checkpoint c;
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
    c.model = model_config_from_json(h.at("model"));
    c.train = train_config_from_json(h.at("train"));
    c.data = h.at("data");
    c.info = h.value("info", nlohmann::json::object());
    c.step = h.at("step").get<std::int64_t>();
    c.val_loss = h.at("val_loss").get<double>();
    c.adam_steps = h.at("adam_steps").get<std::int64_t>();
    c.ema_updates = h.at("ema_updates").get<std::int64_t>();
    for (const auto& t : h.at("tensors")) {
      c.names.push_back(t.at("name").get<std::string>());
      c.shapes.push_back(t.at("shape").get<Shape>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint header in " + file.string() + ": " + e.what());
  }
  const std::string dtype = h.at("dtype").get<std::string>();
  if (dtype != "float32" && dtype != "float64") throw FormatError("unknown checkpoint dtype " + dtype);
  for (int s = 0; s < 4; ++s) {
    auto& v = section(c, s);
    for (const Shape& shape : c.shapes) {
      const auto n = static_cast<std::size_t>(numel(shape));
      v.push_back(dtype == "float32" ? read_array<float>(in, n, file) : read_array<double>(in, n, file));
    }
  }
  if (in.peek() != EOF) throw FormatError("trailing bytes in checkpoint " + file.string());
  return c;
}

}  // namespace nn
D2G_NN_END
