#pragma once

#include <filesystem>
#include <string>

#include "tmlab/sits_data.hpp"

namespace tmlab::data {

inline constexpr const char* kDatasetFormat = "tmlab-dataset";
inline constexpr int kDatasetVersion = 1;

// One JSON object per line: a header with format, version, classes, channels
// and domain_id, then one line per sample. Paths ending in ".gz" are written
// and read gzip-compressed.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

std::string format_sample_line(const TimeSeriesSample& sample);

}  // namespace tmlab::data
