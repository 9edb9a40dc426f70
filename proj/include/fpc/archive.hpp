// Tensor container: "FPTA1" magic, text header (config lines, tensor
// records), contiguous little-endian IEEE-754 payloads in header order, and
// a trailing CRC-32 of the payload bytes. One format serves checkpoints and
// imported pretrained backbones.
#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fpc/backbone.hpp"
#include "fpc/model.hpp"
#include "fpc/tensor.hpp"

namespace fpc {

template <class T>
constexpr const char* dtype_code() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

namespace detail {

inline std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace detail

template <class T>
void write_archive(const std::string& path,
                   const std::vector<NamedTensor<T>>& tensors,
                   const std::vector<std::pair<std::string, std::string>>& config) {
  std::ostringstream header;
  header << "FPTA1\n";
  for (const auto& [k, v] : config) header << "config " << k << ' ' << v << '\n';
  header << "count " << tensors.size() << '\n';
  for (const auto& [name, tensor] : tensors) {
    header << "tensor " << name << ' ' << dtype_code<T>() << ' ' << tensor->rank();
    for (int d : tensor->shape()) header << ' ' << d;
    header << '\n';
  }
  header << "data\n";

  std::vector<unsigned char> payload;
  for (const auto& [name, tensor] : tensors) {
    const std::size_t bytes = static_cast<std::size_t>(tensor->numel()) * sizeof(T);
    const std::size_t off = payload.size();
    payload.resize(off + bytes);
    std::memcpy(payload.data() + off, tensor->data(), bytes);
  }
  const std::uint32_t crc = detail::crc32_bytes(payload.data(), payload.size());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw data_error("cannot write archive '" + path + "'");
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    unsigned char crc_le[4] = {static_cast<unsigned char>(crc & 0xFF),
                               static_cast<unsigned char>((crc >> 8) & 0xFF),
                               static_cast<unsigned char>((crc >> 16) & 0xFF),
                               static_cast<unsigned char>((crc >> 24) & 0xFF)};
    out.write(reinterpret_cast<const char*>(crc_le), 4);
    if (!out) throw data_error("write failed for archive '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw data_error("cannot rename temp archive into '" + path + "'");
}

template <class T>
struct ArchiveContents {
  std::vector<std::pair<std::string, std::string>> config;  // ordered, repeatable
  std::vector<std::pair<std::string, Tensor<T>>> tensors;   // header order

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

template <class T>
ArchiveContents<T> read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open archive '" + path + "'");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = blob.find('\n', pos);
    if (nl == std::string::npos)
      throw data_error("archive '" + path + "': truncated header");
    std::string line = blob.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  if (next_line() != "FPTA1") throw data_error("archive '" + path + "': bad magic");
  ArchiveContents<T> out;
  struct Record {
    std::string name, dtype;
    Shape shape;
  };
  std::vector<Record> records;
  long long declared = -1;
  for (;;) {
    std::string line = next_line();
    if (line == "data") break;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "config") {
      std::string key;
      is >> key;
      std::string value;
      std::getline(is, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      out.config.emplace_back(key, value);
    } else if (kind == "count") {
      is >> declared;
    } else if (kind == "tensor") {
      Record r;
      int rank = 0;
      is >> r.name >> r.dtype >> rank;
      for (int i = 0; i < rank; ++i) {
        int d = 0;
        is >> d;
        r.shape.push_back(d);
      }
      if (!is) throw data_error("archive '" + path + "': malformed tensor record");
      if (r.dtype != dtype_code<T>())
        throw data_error("archive '" + path + "': tensor '" + r.name + "' has dtype " +
                         r.dtype + " but the engine is running " + dtype_code<T>());
      records.push_back(std::move(r));
    } else {
      throw data_error("archive '" + path + "': unknown header line '" + line + "'");
    }
  }
  if (declared != static_cast<long long>(records.size()))
    throw data_error("archive '" + path + "': tensor count mismatch");

  std::size_t payload_bytes = 0;
  for (const auto& r : records)
    payload_bytes += static_cast<std::size_t>(shape_numel(r.shape)) * sizeof(T);
  if (blob.size() < pos + payload_bytes + 4)
    throw data_error("archive '" + path + "': CRC check failed (payload truncated)");
  const unsigned char* payload = reinterpret_cast<const unsigned char*>(blob.data()) + pos;
  const unsigned char* crc_le = payload + payload_bytes;
  const std::uint32_t stored = static_cast<std::uint32_t>(crc_le[0]) |
                               (static_cast<std::uint32_t>(crc_le[1]) << 8) |
                               (static_cast<std::uint32_t>(crc_le[2]) << 16) |
                               (static_cast<std::uint32_t>(crc_le[3]) << 24);
  const std::uint32_t actual = detail::crc32_bytes(payload, payload_bytes);
  if (stored != actual) {
    std::ostringstream msg;
    msg << "archive '" << path << "': CRC check failed (stored 0x" << std::hex << stored
        << ", computed 0x" << actual << ")";
    throw data_error(msg.str());
  }

  std::size_t off = 0;
  for (const auto& r : records) {
    Tensor<T> t(r.shape);
    const std::size_t bytes = static_cast<std::size_t>(t.numel()) * sizeof(T);
    std::memcpy(t.mut(), payload + off, bytes);
    off += bytes;
    out.tensors.emplace_back(r.name, std::move(t));
  }
  return out;
}

// ---- model persistence -------------------------------------------------------

inline std::string format_stage(const StageSpec& s) {
  std::ostringstream os;
  os << (s.kind == BlockKind::fused_mbconv ? "fused_mbconv" : "mbconv") << ',' << s.expansion
     << ',' << s.out_channels << ',' << s.num_repeats << ',' << s.stride << ',' << s.kernel
     << ',' << s.se_ratio;
  return os.str();
}

inline StageSpec parse_stage(const std::string& value, const std::string& where) {
  std::istringstream is(value);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(is, field, ',')) fields.push_back(field);
  if (fields.size() != 7)
    throw usage_error(where + ": stage needs 7 comma-separated fields "
                              "(kind,expansion,out_channels,repeats,stride,kernel,se_ratio)");
  StageSpec s;
  if (fields[0] == "mbconv")
    s.kind = BlockKind::mbconv;
  else if (fields[0] == "fused_mbconv" || fields[0] == "fused")
    s.kind = BlockKind::fused_mbconv;
  else
    throw usage_error(where + ": unknown block kind '" + fields[0] + "'");
  try {
    s.expansion = std::stod(fields[1]);
    s.out_channels = std::stoi(fields[2]);
    s.num_repeats = std::stoi(fields[3]);
    s.stride = std::stoi(fields[4]);
    s.kernel = std::stoi(fields[5]);
    s.se_ratio = std::stod(fields[6]);
  } catch (const std::exception&) {
    throw usage_error(where + ": malformed stage '" + value + "'");
  }
  return s;
}

template <class T>
void save_model(Model<T>& model, const std::string& path) {
  std::vector<std::pair<std::string, std::string>> config;
  const ModelConfig& mc = model.config;
  config.emplace_back("backbone", mc.backbone);
  config.emplace_back("attention", attention_name(mc.attention));
  config.emplace_back("mha_heads", std::to_string(mc.mha_heads));
  config.emplace_back("mlp_hidden",
                      std::to_string(mc.mlp_h1) + "," + std::to_string(mc.mlp_h2));
  config.emplace_back("num_classes", std::to_string(mc.num_classes));
  config.emplace_back("dropout_p", std::to_string(mc.dropout_p));
  config.emplace_back("dropout_layers", std::to_string(mc.dropout_layers));
  config.emplace_back("freeze_prefix", std::to_string(mc.freeze_prefix));
  const BackboneConfig& bc = model.backbone_config;
  config.emplace_back("bb_name", bc.name);
  config.emplace_back("bb_in_channels", std::to_string(bc.in_channels));
  config.emplace_back("bb_stem_channels", std::to_string(bc.stem_channels));
  config.emplace_back("bb_head_channels", std::to_string(bc.head_channels));
  config.emplace_back("bb_input_resolution", std::to_string(bc.input_resolution));
  for (const auto& s : bc.stages) config.emplace_back("bb_stage", format_stage(s));
  write_archive<T>(path, model.named_tensors(), config);
}

template <class T>
Model<T> load_model(const std::string& path) {
  ArchiveContents<T> arc = read_archive<T>(path);
  ModelConfig mc;
  BackboneConfig bc;
  bc.stages.clear();
  auto to_int = [&](const std::string& v, const std::string& key) {
    try {
      return std::stoi(v);
    } catch (const std::exception&) {
      throw data_error("archive '" + path + "': bad integer for " + key);
    }
  };
  for (const auto& [key, value] : arc.config) {
    if (key == "backbone") mc.backbone = value;
    else if (key == "attention") mc.attention = attention_from_name(value);
    else if (key == "mha_heads") mc.mha_heads = to_int(value, key);
    else if (key == "mlp_hidden") {
      const auto comma = value.find(',');
      if (comma == std::string::npos)
        throw data_error("archive '" + path + "': malformed mlp_hidden");
      mc.mlp_h1 = to_int(value.substr(0, comma), key);
      mc.mlp_h2 = to_int(value.substr(comma + 1), key);
    } else if (key == "num_classes") mc.num_classes = to_int(value, key);
    else if (key == "dropout_p") mc.dropout_p = std::stod(value);
    else if (key == "dropout_layers") mc.dropout_layers = to_int(value, key);
    else if (key == "freeze_prefix") mc.freeze_prefix = to_int(value, key);
    else if (key == "bb_name") bc.name = value;
    else if (key == "bb_in_channels") bc.in_channels = to_int(value, key);
    else if (key == "bb_stem_channels") bc.stem_channels = to_int(value, key);
    else if (key == "bb_head_channels") bc.head_channels = to_int(value, key);
    else if (key == "bb_input_resolution") bc.input_resolution = to_int(value, key);
    else if (key == "bb_stage") bc.stages.push_back(parse_stage(value, "archive " + path));
    else throw data_error("archive '" + path + "': unknown config key '" + key + "'");
  }

  Model<T> model = build_model<T>(mc, bc, 0);
  for (auto& [name, tensor] : model.named_tensors()) {
    const Tensor<T>* stored = arc.find(name);
    if (!stored)
      throw data_error("archive '" + path + "': missing tensor '" + name + "'");
    if (stored->shape() != tensor->shape())
      throw data_error("archive '" + path + "': tensor '" + name + "' has shape " +
                       shape_str(stored->shape()) + " but the config requires " +
                       shape_str(tensor->shape()));
    *tensor = *stored;
  }
  if (arc.tensors.size() != model.named_tensors().size()) {
    for (const auto& [name, t] : arc.tensors) {
      bool known = false;
      for (const auto& [n2, t2] : model.named_tensors()) known = known || n2 == name;
      if (!known)
        throw data_error("archive '" + path + "': unexpected tensor '" + name + "'");
    }
  }
  return model;
}

}  // namespace fpc
