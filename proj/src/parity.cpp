#include "colongpt/parity.hpp"

#include <fstream>

#include "colongpt/checkpoint.hpp"
#include "colongpt/error.hpp"
#include "colongpt/lm.hpp"
#include "colongpt/rng.hpp"

namespace colongpt::parity {
namespace {

Tensor random(std::vector<std::size_t> shape, SplitMix64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

Tensor evaluate(const Case& c, const ag::ParamMap& arrays) {
  auto in = [&](std::size_t i) -> const Tensor& {
    auto it = arrays.find(c.inputs.at(i));
    if (it == arrays.end()) throw DataError("parity case '" + c.name + "' lacks array '" + c.inputs.at(i) + "'");
    return it->second;
  };
  ag::Tape tape;
  if (c.op == "adaptive_avg_pool2d") {
    const Tensor& x = in(0);  // (h*w, c)
    return ag::adaptive_avg_pool(tape.constant(x), c.attrs.at("height"), c.attrs.at("width"), c.attrs.at("side"))
        .value();
  }
  if (c.op == "conv3x3_pad1") {
    return ag::conv3x3(tape.constant(in(0)), c.attrs.at("height"), c.attrs.at("width"), tape.constant(in(1)),
                       tape.constant(in(2)))
        .value();
  }
  if (c.op == "gelu_exact") return ag::gelu(tape.constant(in(0))).value();
  if (c.op == "linear") return ag::linear(tape.constant(in(0)), tape.constant(in(1)), tape.constant(in(2))).value();
  if (c.op == "lora_merge") return lm::lora_merge(in(0), in(1), in(2), c.attrs.at("scale"));
  if (c.op == "masked_cross_entropy") {
    const Tensor& logits = in(0);
    const Tensor& tg = in(1);
    const Tensor& mk = in(2);
    std::vector<lm::Token> targets;
    std::vector<bool> mask;
    for (std::size_t i = 0; i < tg.size(); ++i) {
      targets.push_back(static_cast<lm::Token>(tg[i]));
      mask.push_back(mk[i] != 0.0);
    }
    return Tensor({1}, lm::masked_ce_loss(logits, targets, mask));
  }
  throw DataError("unknown parity operator '" + c.op + "'");
}

}  // namespace

Dump build(std::uint64_t seed) {
  SplitMix64 rng(keyed_hash(seed, "parity"));
  Dump d;
  auto add = [&](Case c, std::vector<Tensor> inputs) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const std::string name = c.name + ".in" + std::to_string(i);
      c.inputs.push_back(name);
      d.arrays[name] = std::move(inputs[i]);
    }
    c.output = c.name + ".out";
    d.arrays[c.output] = evaluate(c, d.arrays);
    d.cases.push_back(std::move(c));
  };
  auto pool = [&](const std::string& name, std::size_t h, std::size_t w, std::size_t s, std::size_t ch) {
    Case c{name, "adaptive_avg_pool2d"};
    c.attrs = {{"height", h}, {"width", w}, {"side", s}, {"layout", "hw_c"}};
    add(std::move(c), {random({h * w, ch}, rng)});
  };
  pool("pool_even_4x4_s2", 4, 4, 2, 3);
  pool("pool_uneven_5x5_s3", 5, 5, 3, 2);
  pool("pool_uneven_7x7_s4", 7, 7, 4, 2);
  pool("pool_identity_4x4_s4", 4, 4, 4, 3);
  {
    Case c{"conv3x3_pad1_5x4", "conv3x3_pad1"};
    c.attrs = {{"height", 5}, {"width", 4}, {"layout", "hw_c"}, {"weight_layout", "out_in_kh_kw"}};
    add(std::move(c), {random({20, 3}, rng), random({4, 3, 3, 3}, rng, 0.3), random({4}, rng, 0.1)});
  }
  {
    Case c{"gelu_exact", "gelu_exact"};
    Tensor x = random({4, 8}, rng, 2.0);
    x[0] = 0.0;
    x[1] = -6.0;
    x[2] = 6.0;
    add(std::move(c), {std::move(x)});
  }
  add(Case{"linear_5x6_to_4", "linear"}, {random({5, 6}, rng), random({4, 6}, rng, 0.4), random({4}, rng, 0.1)});
  {
    Case c{"lora_merge_r3", "lora_merge"};
    c.attrs = {{"scale", 2.0}, {"rank", 3}, {"alpha", 6.0}};
    add(std::move(c), {random({4, 5}, rng), random({3, 5}, rng), random({4, 3}, rng)});
  }
  {
    Case c{"masked_ce_6x9", "masked_cross_entropy"};
    Tensor targets({6});
    Tensor mask({6});
    for (std::size_t i = 0; i < 6; ++i) {
      targets[i] = static_cast<double>(rng.below(9));
      mask[i] = i % 3 == 0 ? 0.0 : 1.0;
    }
    add(std::move(c), {random({6, 9}, rng, 1.5), std::move(targets), std::move(mask)});
  }
  return d;
}

void write(const Dump& dump, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  checkpoint::write(dump.arrays, dir / "arrays.ckpt");
  nlohmann::ordered_json j;
  j["arrays"] = "arrays.ckpt";
  j["cases"] = nlohmann::ordered_json::array();
  for (const Case& c : dump.cases) {
    j["cases"].push_back({{"name", c.name},
                          {"operator", c.op},
                          {"inputs", c.inputs},
                          {"output", c.output},
                          {"attrs", c.attrs},
                          {"tolerance", c.tolerance}});
  }
  std::ofstream os(dir / "cases.json");
  if (!os) throw UsageError("cannot write parity manifest in '" + dir.string() + "'");
  os << j.dump(2) << '\n';
}

Dump read(const std::filesystem::path& dir) {
  std::ifstream is(dir / "cases.json");
  if (!is) throw UsageError("no parity dump in '" + dir.string() + "'");
  Dump d;
  try {
    const auto j = nlohmann::json::parse(is);
    d.arrays = checkpoint::read(dir / j.at("arrays").get<std::string>());
    for (const auto& e : j.at("cases")) {
      Case c;
      c.name = e.at("name");
      c.op = e.at("operator");
      c.inputs = e.at("inputs").get<std::vector<std::string>>();
      c.output = e.at("output");
      c.attrs = e.at("attrs");
      c.tolerance = e.at("tolerance");
      d.cases.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "cases.json").string() + ": " + e.what());
  }
  return d;
}

std::vector<std::pair<std::string, double>> self_check(const Dump& dump) {
  std::vector<std::pair<std::string, double>> out;
  for (const Case& c : dump.cases) {
    const Tensor got = evaluate(c, dump.arrays);
    out.emplace_back(c.name, max_abs_diff(got, dump.arrays.at(c.output)));
  }
  return out;
}

}  // namespace colongpt::parity
