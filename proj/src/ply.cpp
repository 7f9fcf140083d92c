#include "splatflow/ply.hpp"

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace splatflow {

namespace {

const std::array<const char*, 14> kPropertyNames = {
    "x",       "y",       "z",       "f_dc_0",  "f_dc_1",  "f_dc_2", "opacity",
    "scale_0", "scale_1", "scale_2", "rot_0",   "rot_1",   "rot_2",  "rot_3"};

// file property index -> ParamVector channel
const std::array<int, 14> kPropertyToChannel = {
    kChMean + 0,     kChMean + 1,     kChMean + 2,     kChRgb + 0,
    kChRgb + 1,      kChRgb + 2,      kChOpacity,      kChLogScale + 0,
    kChLogScale + 1, kChLogScale + 2, kChRotation + 0, kChRotation + 1,
    kChRotation + 2, kChRotation + 3};

}  // namespace

void write_ply(const GaussianSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ply: cannot open " + path);

  out << "ply\n"
      << "format binary_little_endian 1.0\n"
      << "element vertex " << set.size() << "\n";
  for (const char* name : kPropertyNames) out << "property float " << name << "\n";
  out << "end_header\n";

  std::vector<float> row(14);
  for (const auto& g : set.gaussians) {
    const ParamVector v = pack(g);
    for (int p = 0; p < 14; ++p) row[p] = static_cast<float>(v(kPropertyToChannel[p]));
    out.write(reinterpret_cast<const char*>(row.data()), 14 * sizeof(float));
  }
  if (!out) throw std::runtime_error("write_ply: write failed for " + path);
}

GaussianSet read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ply: cannot open " + path);

  std::string line;
  if (!std::getline(in, line) || line != "ply")
    throw std::runtime_error("read_ply: not a PLY file: " + path);

  std::size_t vertex_count = 0;
  std::vector<std::string> props;
  bool binary_le = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = (fmt == "binary_little_endian");
    } else if (tok == "element") {
      std::string name;
      ls >> name >> vertex_count;
      if (name != "vertex")
        throw std::runtime_error("read_ply: unexpected element " + name);
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      if (type != "float")
        throw std::runtime_error("read_ply: unsupported property type " + type);
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  if (!binary_le) throw std::runtime_error("read_ply: expected binary_little_endian");

  // map file columns to channels by name
  std::vector<int> col_to_channel(props.size(), -1);
  for (std::size_t c = 0; c < props.size(); ++c) {
    for (int p = 0; p < 14; ++p) {
      if (props[c] == kPropertyNames[p]) {
        col_to_channel[c] = kPropertyToChannel[p];
        break;
      }
    }
  }
  for (int p = 0; p < 14; ++p) {
    bool found = false;
    for (std::size_t c = 0; c < props.size(); ++c)
      if (props[c] == kPropertyNames[p]) found = true;
    if (!found)
      throw std::runtime_error(std::string("read_ply: missing property ") +
                               kPropertyNames[p]);
  }

  GaussianSet set;
  set.gaussians.resize(vertex_count);
  std::vector<float> row(props.size());
  for (std::size_t i = 0; i < vertex_count; ++i) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw std::runtime_error("read_ply: truncated file " + path);
    ParamVector v = ParamVector::Zero();
    for (std::size_t c = 0; c < props.size(); ++c)
      if (col_to_channel[c] >= 0) v(col_to_channel[c]) = static_cast<double>(row[c]);
    set.gaussians[i] = unpack(v);
  }
  return set;
}

}  // namespace splatflow
