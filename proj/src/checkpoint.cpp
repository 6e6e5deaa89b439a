#include "fp/checkpoint.hpp"

#include <fstream>

#include "fp/binio.hpp"
#include "fp/errors.hpp"

namespace fp {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

void write_tensor(BinWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape) w.u64(static_cast<std::uint64_t>(d));
  w.f32_array(t.v.data(), t.v.size());
}

Tensor read_tensor(BinReader& r, std::string* name) {
  *name = r.str();
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw DataError("checkpoint: tensor rank corrupt");
  std::vector<std::int64_t> shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(r.u64());
  Tensor t(shape);
  r.f32_array(t.v.data(), t.v.size());
  return t;
}

void write_section(BinWriter& w, const std::string& section,
                   const std::vector<std::pair<std::string, const Tensor*>>& ts) {
  w.str(section);
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& [name, t] : ts) write_tensor(w, name, *t);
}

}  // namespace

void write_checkpoint(const std::string& path, const ModelBundle& bundle) {
  atomic_write_file(path, [&](std::ostream& os) {
    BinWriter w(os);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(kByteOrderMarker);
    nlohmann::json header = bundle.config;
    header["kind"] = bundle.kind;
    w.str(header.dump());
    w.u64(static_cast<std::uint64_t>(bundle.params.step()));

    const auto& entries = bundle.params.entries();
    std::vector<std::pair<std::string, const Tensor*>> values, m, mv, ema;
    for (const auto& e : entries) {
      values.emplace_back(e.name, &e.value);
      m.emplace_back(e.name, &e.m);
      mv.emplace_back(e.name, &e.mv);
    }
    if (bundle.params.has_ema())
      for (std::size_t i = 0; i < entries.size(); ++i)
        ema.emplace_back(entries[i].name, &bundle.params.ema()[i]);

    w.u32(bundle.params.has_ema() ? 4u : 3u);
    write_section(w, "params", values);
    write_section(w, "opt_m", m);
    write_section(w, "opt_v", mv);
    if (bundle.params.has_ema()) write_section(w, "ema", ema);
  });
}

ModelBundle read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  BinReader r(is, path);
  r.expect_magic(kMagic, "FPNN checkpoint");
  r.expect_version(kVersion);
  r.expect_byte_order();

  ModelBundle bundle;
  const std::string header_text = r.str(1 << 24);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": config header is not valid JSON: " + e.what());
  }
  bundle.kind = header.value("kind", "");
  header.erase("kind");
  bundle.config = std::move(header);
  const auto step = static_cast<std::int64_t>(r.u64());

  const std::uint32_t n_sections = r.u32();
  for (std::uint32_t s = 0; s < n_sections; ++s) {
    const std::string section = r.str();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name;
      Tensor t = read_tensor(r, &name);
      if (section == "params") {
        bundle.params.add(name, std::move(t));
      } else if (section == "opt_m" || section == "opt_v") {
        auto& e = bundle.params.entries()[static_cast<std::size_t>(
            bundle.params.index_of(name))];
        (section == "opt_m" ? e.m : e.mv) = std::move(t);
      } else if (section == "ema") {
        if (!bundle.params.has_ema()) {
          bundle.params.init_ema();
        }
        bundle.params.ema_mutable()[static_cast<std::size_t>(
            bundle.params.index_of(name))] = std::move(t);
      } else {
        throw DataError(path + ": unknown checkpoint section " + section);
      }
    }
  }
  bundle.params.set_step(step);
  return bundle;
}

}  // namespace fp
