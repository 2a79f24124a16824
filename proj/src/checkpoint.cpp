#include "tmlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "tmlab/errors.hpp"

namespace tmlab::model {

namespace {

using nlohmann::json;

struct Record {
  std::vector<std::uint64_t> shape;
  std::vector<float> values;
};

template <typename T>
void put(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    out.write(bytes.data(), sizeof(T));
  } else {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
}

template <typename T>
T get(std::istream& in) {
  std::array<char, sizeof(T)> bytes;
  if (!in.read(bytes.data(), sizeof(T))) throw ParseError("checkpoint is truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <typename Tensor>
void write_record(std::ostream& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  out.write("f32", 3);
  const bool vector = Tensor::ColsAtCompileTime == 1;
  put<std::uint32_t>(out, vector ? 1 : 2);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
  if (!vector) put<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
  // Row-major payload.
  for (Index r = 0; r < t.rows(); ++r)
    for (Index c = 0; c < t.cols(); ++c) put<float>(out, t(r, c));
}

Record read_record(std::istream& in, std::string& name) {
  const auto name_len = get<std::uint32_t>(in);
  if (name_len == 0 || name_len > 4096) throw ParseError("checkpoint record has a bad name length");
  name.resize(name_len);
  if (!in.read(name.data(), name_len)) throw ParseError("checkpoint is truncated");
  char dtype[3];
  if (!in.read(dtype, 3)) throw ParseError("checkpoint is truncated");
  if (std::memcmp(dtype, "f32", 3) != 0) throw ParseError("tensor '" + name + "' is not f32");
  const auto rank = get<std::uint32_t>(in);
  if (rank < 1 || rank > 2) throw ParseError("tensor '" + name + "' has unsupported rank");
  Record rec;
  std::uint64_t count = 1;
  for (std::uint32_t j = 0; j < rank; ++j) {
    rec.shape.push_back(get<std::uint64_t>(in));
    count *= rec.shape.back();
  }
  if (count > (1ULL << 32)) throw ParseError("tensor '" + name + "' is implausibly large");
  rec.values.resize(count);
  for (auto& v : rec.values) v = get<float>(in);
  return rec;
}

template <typename Tensor>
void assign(Tensor& t, const std::string& name, std::map<std::string, Record>& records) {
  const auto it = records.find(name);
  if (it == records.end()) throw ParseError("checkpoint lacks tensor '" + name + "'");
  const Record& rec = it->second;
  const bool vector = Tensor::ColsAtCompileTime == 1;
  const std::uint64_t rows = rec.shape[0], cols = rec.shape.size() > 1 ? rec.shape[1] : 1;
  if ((vector && rec.shape.size() != 1) || rows != static_cast<std::uint64_t>(t.rows()) ||
      cols != static_cast<std::uint64_t>(t.cols()))
    throw DimensionError("tensor '" + name + "' has a shape inconsistent with the header dims");
  std::size_t k = 0;
  for (Index r = 0; r < t.rows(); ++r)
    for (Index c = 0; c < t.cols(); ++c) t(r, c) = rec.values[k++];
  records.erase(it);
}

json dims_json(const ModelDims& d) {
  return {{"channels", d.channels}, {"hidden", d.hidden}, {"embed", d.embed},
          {"key", d.key},           {"value", d.value},   {"classes", d.classes}};
}

template <typename F>
void for_each_tensor(Checkpoint& ck, F&& f) {
  ck.params.weights.for_each([&](std::string_view name, auto& t) { f(std::string(name), t); });
  for (Domain d : {Domain::source, Domain::target})
    ck.params.norm_for(d).for_each([&](std::string_view name, auto& t) {
      f("norm." + std::string(to_string(d)) + "." + std::string(name), t);
    });
  if (ck.optimizer) {
    ck.optimizer->first_moment.for_each(
        [&](std::string_view name, auto& t) { f("adam.m." + std::string(name), t); });
    ck.optimizer->second_moment.for_each(
        [&](std::string_view name, auto& t) { f("adam.v." + std::string(name), t); });
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  Checkpoint ck = checkpoint;
  std::size_t tensors = 0;
  for_each_tensor(ck, [&](const std::string&, const auto&) { ++tensors; });

  json header = {{"format", kCheckpointFormat},
                 {"version", kCheckpointVersion},
                 {"dims", dims_json(ck.params.dims)},
                 {"classes", ck.params.class_names},
                 {"dataset_classes", ck.dataset_classes},
                 {"posenc",
                  {{"dim", ck.params.posenc.dim},
                   {"max_shift", ck.params.posenc.max_shift},
                   {"base", ck.params.posenc.base}}},
                 {"tensors", tensors}};
  if (ck.optimizer) {
    const auto& c = ck.optimizer->config;
    header["optimizer"] = {{"step", ck.optimizer->step},         {"learning_rate", c.learning_rate},
                           {"beta1", c.beta1},                   {"beta2", c.beta2},
                           {"epsilon", c.epsilon},               {"weight_decay", c.weight_decay},
                           {"total_steps", c.total_steps}};
  } else {
    header["optimizer"] = nullptr;
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out << header.dump() << '\n';
  for_each_tensor(ck, [&](const std::string& name, const auto& t) { write_record(out, name, t); });
  if (!out) throw InputError("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty checkpoint file", 1);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed checkpoint header: ") + e.what(), 1);
  }

  Checkpoint ck;
  std::size_t tensors = 0;
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat)
      throw ParseError("not a tmlab checkpoint", 1);
    if (header.at("version").get<int>() != kCheckpointVersion)
      throw ParseError("unsupported checkpoint version", 1);
    const auto& d = header.at("dims");
    auto& dims = ck.params.dims;
    dims.channels = d.at("channels").get<Index>();
    dims.hidden = d.at("hidden").get<Index>();
    dims.embed = d.at("embed").get<Index>();
    dims.key = d.at("key").get<Index>();
    dims.value = d.at("value").get<Index>();
    dims.classes = d.at("classes").get<Index>();
    ck.params.class_names = header.at("classes").get<std::vector<std::string>>();
    ck.dataset_classes = header.value("dataset_classes", std::vector<std::string>{});
    const auto& pe = header.at("posenc");
    ck.params.posenc = {pe.at("dim").get<Index>(), pe.at("max_shift").get<int>(),
                        pe.at("base").get<double>()};
    tensors = header.at("tensors").get<std::size_t>();
    const auto& opt = header.at("optimizer");
    if (!opt.is_null()) {
      AdamConfig c;
      c.learning_rate = opt.at("learning_rate").get<double>();
      c.beta1 = opt.at("beta1").get<double>();
      c.beta2 = opt.at("beta2").get<double>();
      c.epsilon = opt.at("epsilon").get<double>();
      c.weight_decay = opt.at("weight_decay").get<double>();
      c.total_steps = opt.at("total_steps").get<std::int64_t>();
      ck.optimizer = OptimizerState<float>::create(dims, c);
      ck.optimizer->step = opt.at("step").get<std::int64_t>();
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what(), 1);
  }
  try {
    ck.params.dims.validate();
    ck.params.posenc.validate();
  } catch (const InputError& e) {
    throw DimensionError(std::string("checkpoint header: ") + e.what());
  }
  if (static_cast<Index>(ck.params.class_names.size()) != ck.params.dims.classes)
    throw DimensionError("checkpoint class list does not match its class dimension");
  if (ck.params.posenc.dim != ck.params.dims.embed)
    throw DimensionError("checkpoint positional encoding does not match the embedding size");

  std::map<std::string, Record> records;
  for (std::size_t j = 0; j < tensors; ++j) {
    std::string name;
    Record rec = read_record(in, name);
    if (!records.emplace(name, std::move(rec)).second)
      throw ParseError("duplicate tensor '" + name + "'");
  }
  ck.params.weights = Weights<float>::zeros(ck.params.dims);
  ck.params.norm = {NormStats<float>::identity(ck.params.dims),
                    NormStats<float>::identity(ck.params.dims)};
  for_each_tensor(ck, [&](const std::string& name, auto& t) { assign(t, name, records); });
  if (!records.empty()) throw ParseError("unexpected tensor '" + records.begin()->first + "'");
  return ck;
}

}  // namespace tmlab::model
