#include "mfc/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "mfc/errors.hpp"

namespace mfc {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'N', '1'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError("truncated checkpoint");
  return v;
}

void put_sizes(std::ofstream& out, const std::vector<int>& sizes) {
  put<std::int32_t>(out, static_cast<std::int32_t>(sizes.size()));
  for (int s : sizes) put<std::int32_t>(out, s);
}

std::vector<int> get_sizes(std::ifstream& in) {
  const int n = get<std::int32_t>(in);
  if (n < 0 || n > 1024) throw ConfigError("corrupt checkpoint layer count");
  std::vector<int> sizes(n);
  for (int& s : sizes) s = get<std::int32_t>(in);
  return sizes;
}

}  // namespace

void save_checkpoint(const MeanFieldNet& net, const std::string& path) {
  validate(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, 1);
  put<std::uint8_t>(out, net.variant == MfVariant::Bin ? 0 : 1);
  put<std::uint8_t>(out, net.time_input ? 1 : 0);
  put<std::uint8_t>(out, 0);  // tanh
  put<std::uint8_t>(out, 0);
  put<std::int32_t>(out, net.output_dim);
  put<std::int32_t>(out, net.k_bins);
  put<std::int32_t>(out, net.latent_dim);
  put_sizes(out, net.outer.layers);
  put_sizes(out, net.variant == MfVariant::Cylindrical ? net.inner.layers : std::vector<int>{});
  put<std::uint64_t>(out, static_cast<std::uint64_t>(net.params.size()));
  out.write(reinterpret_cast<const char*>(net.params.data()),
            static_cast<std::streamsize>(net.params.size() * sizeof(double)));
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

MeanFieldNet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw ConfigError("bad checkpoint magic");
  if (get<std::uint32_t>(in) != 1) throw ConfigError("unsupported checkpoint version");

  MeanFieldNet net;
  net.variant = get<std::uint8_t>(in) == 0 ? MfVariant::Bin : MfVariant::Cylindrical;
  net.time_input = get<std::uint8_t>(in) != 0;
  if (get<std::uint8_t>(in) != 0) throw ConfigError("unsupported activation tag");
  get<std::uint8_t>(in);
  net.output_dim = get<std::int32_t>(in);
  net.k_bins = get<std::int32_t>(in);
  net.latent_dim = get<std::int32_t>(in);
  net.outer.layers = get_sizes(in);
  net.inner.layers = get_sizes(in);
  const auto n_params = get<std::uint64_t>(in);
  net.params.resize(static_cast<Eigen::Index>(n_params));
  in.read(reinterpret_cast<char*>(net.params.data()),
          static_cast<std::streamsize>(n_params * sizeof(double)));
  if (!in) throw ConfigError("truncated checkpoint parameters");
  validate(net);
  return net;
}

}  // namespace mfc
