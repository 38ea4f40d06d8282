#include "nflow/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <utility>
#include "json.hpp"

namespace nflow {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using json = nlohmann::json;

json config_json(const FlowConfig& c) {
  return json{{"channels", c.channels},
              {"height", c.height},
              {"width", c.width},
              {"num_scales", c.num_scales},
              {"steps_per_scale", c.steps_per_scale},
              {"double_steps_at", c.double_steps_at},
              {"hidden_channels", c.hidden_channels},
              {"permutation", to_string(c.permutation)}};
}

FlowConfig config_of(const json& j) {
  FlowConfig c;
  c.channels = j.at("channels").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.num_scales = j.at("num_scales").get<std::size_t>();
  c.steps_per_scale = j.at("steps_per_scale").get<std::size_t>();
  c.double_steps_at = j.at("double_steps_at").get<std::vector<std::size_t>>();
  c.hidden_channels = j.at("hidden_channels").get<std::size_t>();
  c.permutation = permutation_from_string(j.at("permutation").get<std::string>());
  return c;
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};


CheckpointInfo read_header(Reader& r) {
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("bad checkpoint magic", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto len = r.get<std::uint32_t>("header length");
  const std::size_t json_at = r.pos();
  const std::uint8_t* text = r.take(len, "header");
  CheckpointInfo info;
  try {
    const json j = json::parse(text, text + len);
    info.config = config_of(j.at("config"));
    info.actnorm_initialized = j.at("actnorm_initialized").get<bool>();
    info.train_step = j.at("train_step").get<std::size_t>();
    info.parameter_count = j.at("parameter_count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what(), json_at);
  } catch (const Error& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what(), json_at);
  }
  return info;
}

}  // namespace

std::string config_to_json(const FlowConfig& config) { return config_json(config).dump(); }

FlowConfig config_from_json(const std::string& text) { return config_of(json::parse(text)); }

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const FlowModel<T>& model, std::size_t train_step) {
  const json header{{"config", config_json(model.config())},
                    {"actnorm_initialized", model.actnorm_initialized()},
                    {"train_step", train_step},
                    {"parameter_count", model.parameter_count()}};
  const std::string text = header.dump();

  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());

  std::vector<const Parameter<T>*> params = model.parameters();
  std::sort(params.begin(), params.end(), [](auto* a, auto* b) { return a->name < b->name; });
  for (const Parameter<T>* p : params) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p->name.size()));
    w.bytes(p->name.data(), p->name.size());
    w.put<std::uint8_t>(std::is_same_v<T, float> ? 0 : 1);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.bytes(p->value.ptr(), p->value.size() * sizeof(T));
  }
  return w.take();
}

template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  CheckpointInfo info = read_header(r);
  FlowModel<T> model = FlowModel<T>::build(info.config, 0);

  std::map<std::string, bool> seen;
  for (const Parameter<T>* p : std::as_const(model).parameters()) seen[p->name] = false;

  while (!r.done()) {
    const std::size_t record_at = r.pos();
    const auto name_len = r.get<std::uint16_t>("record name length");
    const std::uint8_t* name_bytes = r.take(name_len, "record name");
    const std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    Parameter<T>* p = model.find_parameter(name);
    if (!p) throw CheckpointError("unknown parameter '" + name + "'", record_at);
    if (seen[name]) throw CheckpointError("duplicate parameter '" + name + "'", record_at);
    seen[name] = true;

    const std::size_t dtype_at = r.pos();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw CheckpointError("unknown dtype tag " + std::to_string(dtype), dtype_at);
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("dims");
    if (shape != p->value.shape()) {
      throw CheckpointError("parameter '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                                shape_string(p->value.shape()),
                            record_at);
    }
    const std::size_t n = p->value.size();
    if (dtype == 0) {
      const std::uint8_t* raw = r.take(n * sizeof(float), "values");
      for (std::size_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, raw + i * sizeof(float), sizeof(float));
        p->value[i] = static_cast<T>(v);
      }
    } else {
      const std::uint8_t* raw = r.take(n * sizeof(double), "values");
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, raw + i * sizeof(double), sizeof(double));
        p->value[i] = static_cast<T>(v);
      }
    }
  }
  for (const auto& [name, ok] : seen) {
    if (!ok) throw CheckpointError("missing parameter '" + name + "'", r.pos());
  }
  model.set_actnorm_initialized(info.actnorm_initialized);
  info.parameter_count = model.parameter_count();
  return {std::move(model), info};
}

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

template <typename T>
void save_checkpoint(const FlowModel<T>& model, const std::string& path, std::size_t train_step) {
  const auto bytes = serialize_checkpoint(model, train_step);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path);
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  const auto bytes = read_file(path);
  Reader r(bytes);
  return read_header(r);
}

template std::vector<std::uint8_t> serialize_checkpoint(const FlowModel<float>&, std::size_t);
template std::vector<std::uint8_t> serialize_checkpoint(const FlowModel<double>&, std::size_t);
template LoadedCheckpoint<float> deserialize_checkpoint(const std::vector<std::uint8_t>&);
template LoadedCheckpoint<double> deserialize_checkpoint(const std::vector<std::uint8_t>&);
template void save_checkpoint(const FlowModel<float>&, const std::string&, std::size_t);
template void save_checkpoint(const FlowModel<double>&, const std::string&, std::size_t);
template LoadedCheckpoint<float> load_checkpoint(const std::string&);
template LoadedCheckpoint<double> load_checkpoint(const std::string&);

}  // namespace nflow
