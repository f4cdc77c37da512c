#include "empower/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "empower/errors.hpp"

namespace empower {

namespace {

constexpr char magic[8] = {'E', 'M', 'P', 'W', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ParseError("checkpoint truncated", 0);
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 20)) throw ParseError("checkpoint string too long", 0);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw ParseError("checkpoint truncated", 0);
  return s;
}

void get_matrix(std::istream& in, Matrix& m) {
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw ParseError("checkpoint truncated", 0);
}

}  // namespace

void save_checkpoint(std::ostream& out, const std::string& manifest, const std::vector<const ParamBlock*>& blocks) {
  out.write(magic, sizeof magic);
  put(out, checkpoint_version);
  put_string(out, manifest);
  put(out, static_cast<std::uint32_t>(blocks.size()));
  for (const ParamBlock* b : blocks) {
    put_string(out, b->name);
    put(out, static_cast<std::uint64_t>(b->rows()));
    put(out, static_cast<std::uint64_t>(b->cols()));
    put_matrix(out, b->values);
    put_matrix(out, b->adam_m);
    put_matrix(out, b->adam_v);
    put(out, static_cast<std::int64_t>(b->step_count));
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

void save_checkpoint_file(const std::string& path, const std::string& manifest,
                          const std::vector<const ParamBlock*>& blocks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  save_checkpoint(out, manifest, blocks);
}

namespace {

std::string get_header(std::istream& in) {
  char head[8];
  in.read(head, sizeof head);
  if (!in || std::memcmp(head, magic, sizeof magic) != 0) throw ParseError("not a checkpoint file", 0);
  const auto version = get<std::uint32_t>(in);
  if (version != checkpoint_version) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 0);
  }
  return get_string(in);
}

}  // namespace

std::string load_checkpoint(std::istream& in, const std::vector<ParamBlock*>& blocks) {
  std::string manifest = get_header(in);
  std::map<std::string, ParamBlock*> by_name;
  for (ParamBlock* b : blocks) by_name[b->name] = b;
  const auto count = get<std::uint32_t>(in);
  if (count != blocks.size()) {
    throw ParseError("checkpoint has " + std::to_string(count) + " blocks, expected " + std::to_string(blocks.size()), 0);
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_string(in);
    const auto rows = get<std::uint64_t>(in);
    const auto cols = get<std::uint64_t>(in);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("unknown block '" + name + "'", 0);
    ParamBlock& b = *it->second;
    if (rows != static_cast<std::uint64_t>(b.rows()) || cols != static_cast<std::uint64_t>(b.cols())) {
      throw ParseError("shape mismatch for block '" + name + "'", 0);
    }
    get_matrix(in, b.values);
    get_matrix(in, b.adam_m);
    get_matrix(in, b.adam_v);
    b.step_count = get<std::int64_t>(in);
    b.grad.setZero();
  }
  return manifest;
}

std::string load_checkpoint_file(const std::string& path, const std::vector<ParamBlock*>& blocks) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_checkpoint(in, blocks);
}

std::string read_checkpoint_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return get_header(in);
}

}  // namespace empower
