#include "tmlab/dataset_io.hpp"

#include <charconv>
#include <cstdio>
#include <cstring>
#include <memory>

#include <json.hpp>
#include <zlib.h>

#include "tmlab/errors.hpp"

namespace tmlab::data {

namespace {

using nlohmann::json;

bool is_gzip_path(const std::filesystem::path& path) { return path.extension() == ".gz"; }

struct GzCloser {
  void operator()(gzFile f) const { gzclose(f); }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

// gzopen reads plain files transparently, so one reader covers both cases.
class LineReader {
 public:
  explicit LineReader(const std::filesystem::path& path)
      : file_(gzopen(path.c_str(), "rb")) {
    if (!file_) throw InputError("cannot open '" + path.string() + "' for reading");
    gzbuffer(file_.get(), 1 << 16);
  }

  bool next(std::string& line) {
    line.clear();
    for (;;) {
      if (pos_ == end_) {
        const int got = gzread(file_.get(), buffer_, sizeof(buffer_));
        if (got < 0) throw ParseError("read error");
        if (got == 0) return !line.empty();
        pos_ = 0;
        end_ = static_cast<std::size_t>(got);
      }
      const char* begin = buffer_ + pos_;
      const void* nl = std::memchr(begin, '\n', end_ - pos_);
      if (nl) {
        const auto len = static_cast<std::size_t>(static_cast<const char*>(nl) - begin);
        line.append(begin, len);
        pos_ += len + 1;
        return true;
      }
      line.append(begin, end_ - pos_);
      pos_ = end_;
    }
  }

 private:
  GzHandle file_;
  char buffer_[1 << 16];
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

class LineWriter {
 public:
  explicit LineWriter(const std::filesystem::path& path) : path_(path) {
    if (is_gzip_path(path)) {
      gz_.reset(gzopen(path.c_str(), "wb6"));
      if (!gz_) throw InputError("cannot open '" + path.string() + "' for writing");
    } else {
      plain_ = std::fopen(path.c_str(), "wb");
      if (!plain_) throw InputError("cannot open '" + path.string() + "' for writing");
    }
  }
  ~LineWriter() {
    if (plain_) std::fclose(plain_);
  }
  LineWriter(const LineWriter&) = delete;
  LineWriter& operator=(const LineWriter&) = delete;

  void write_line(const std::string& line) {
    bool ok;
    if (gz_) {
      ok = gzwrite(gz_.get(), line.data(), static_cast<unsigned>(line.size())) ==
               static_cast<int>(line.size()) &&
           gzputc(gz_.get(), '\n') == '\n';
    } else {
      ok = std::fwrite(line.data(), 1, line.size(), plain_) == line.size() &&
           std::fputc('\n', plain_) == '\n';
    }
    if (!ok) throw InputError("write to '" + path_.string() + "' failed");
  }

 private:
  std::filesystem::path path_;
  GzHandle gz_;
  std::FILE* plain_ = nullptr;
};

void append_float(std::string& out, float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

template <typename T>
T field(const json& obj, const char* key, std::size_t line, const std::string& id = {}) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing field '") + key + "'", line, id);
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("field '") + key + "': " + e.what(), line, id);
  }
}

}  // namespace

std::string format_sample_line(const TimeSeriesSample& s) {
  std::string out;
  out.reserve(static_cast<std::size_t>(s.pixels.size()) * 10 + 64);
  out += "{\"id\":";
  out += json(s.id).dump();
  out += ",\"days\":[";
  for (std::size_t j = 0; j < s.days.size(); ++j) {
    if (j) out += ',';
    out += std::to_string(s.days[j]);
  }
  out += "],\"shape\":[";
  out += std::to_string(s.timesteps()) + "," + std::to_string(s.pixels_per_step) + "," +
         std::to_string(s.channels());
  out += "],\"pixels\":[";
  const float* data = s.pixels.data();
  for (Index j = 0; j < s.pixels.size(); ++j) {
    if (j) out += ',';
    append_float(out, data[j]);
  }
  out += "],\"label\":";
  out += s.label ? std::to_string(*s.label) : "null";
  out += '}';
  return out;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  LineWriter writer(path);
  json header = {{"format", kDatasetFormat},
                 {"version", kDatasetVersion},
                 {"classes", dataset.class_names},
                 {"channels", dataset.channels},
                 {"domain_id", dataset.domain_id}};
  writer.write_line(header.dump());
  for (const auto& s : dataset.samples) writer.write_line(format_sample_line(s));
}

Dataset load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("no such file: '" + path.string() + "'");
  LineReader reader(path);
  std::string line;
  std::size_t line_no = 0;

  Dataset out;
  bool have_header = false;
  while (reader.next(line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object()) throw ParseError("expected a JSON object", line_no);

    if (!have_header) {
      if (field<std::string>(obj, "format", line_no) != kDatasetFormat)
        throw ParseError("not a tmlab dataset header", line_no);
      if (field<int>(obj, "version", line_no) != kDatasetVersion)
        throw ParseError("unsupported dataset version", line_no);
      out.class_names = field<std::vector<std::string>>(obj, "classes", line_no);
      out.channels = field<Index>(obj, "channels", line_no);
      out.domain_id = field<std::string>(obj, "domain_id", line_no);
      have_header = true;
      continue;
    }

    TimeSeriesSample s;
    s.id = field<std::string>(obj, "id", line_no);
    s.days = field<std::vector<int>>(obj, "days", line_no, s.id);
    const auto shape = field<std::vector<Index>>(obj, "shape", line_no, s.id);
    if (shape.size() != 3) throw ParseError("shape must have three entries", line_no, s.id);
    if (shape[0] != static_cast<Index>(s.days.size()))
      throw ParseError("shape[0] does not match the number of days", line_no, s.id);
    if (shape[2] != out.channels)
      throw ParseError("channel count does not match header", line_no, s.id);
    if (shape[1] < 1) throw ParseError("sample has no pixels", line_no, s.id);
    const auto& pixels = obj.find("pixels");
    if (pixels == obj.end() || !pixels->is_array())
      throw ParseError("missing pixel array", line_no, s.id);
    const Index expected = shape[0] * shape[1] * shape[2];
    if (static_cast<Index>(pixels->size()) != expected)
      throw ParseError("pixel count " + std::to_string(pixels->size()) + " != T*N*C = " +
                           std::to_string(expected),
                       line_no, s.id);
    s.pixels_per_step = shape[1];
    s.pixels.resize(shape[2], shape[0] * shape[1]);
    float* dst = s.pixels.data();
    for (const auto& v : *pixels) {
      if (!v.is_number()) throw ParseError("non-numeric pixel value", line_no, s.id);
      *dst++ = v.get<float>();
    }
    const auto label = obj.find("label");
    if (label != obj.end() && !label->is_null()) {
      if (!label->is_number_integer()) throw ParseError("label must be an integer", line_no, s.id);
      s.label = label->get<int>();
    }
    try {
      validate_sample(s, out.channels, out.num_classes());
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line_no);
    }
    out.samples.push_back(std::move(s));
  }
  if (!have_header) throw ParseError("missing dataset header", line_no);
  try {
    validate_dataset(Dataset{out.domain_id, out.class_names, out.channels, {}});
  } catch (const ParseError& e) {
    throw ParseError(e.what(), 1);
  }
  return out;
}

}  // namespace tmlab::data
