#include "carry/serialize.hpp"

#include <cstdio>

namespace carry {

json to_json(const model::ModelConfig& c) {
  return {{"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"dropout", c.dropout},
          {"vocab", c.vocab},
          {"width", c.width},
          {"causal", c.causal},
          {"biases", c.biases},
          {"dropout_placement", std::string(model::placement_name(c.dropout_placement))},
          {"rope_base", c.rope_base},
          {"ln_eps", c.ln_eps}};
}

model::ModelConfig model_config_from_json(const json& j) {
  model::ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.vocab = j.at("vocab").get<int>();
  c.width = j.at("width").get<int>();
  c.causal = j.at("causal").get<bool>();
  c.biases = j.at("biases").get<bool>();
  c.dropout_placement = model::placement_from_name(j.at("dropout_placement").get<std::string>());
  c.rope_base = j.at("rope_base").get<double>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.validate();
  return c;
}

json to_json(const AdamWConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay}};
}

AdamWConfig adamw_config_from_json(const json& j) {
  AdamWConfig c;
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  return c;
}

json to_json(const training::TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"optim", to_json(c.optim)},
          {"split", c.split},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"width", c.width},
          {"checkpoint_every", c.checkpoint_every},
          {"checkpoint_every_epoch", c.checkpoint_every_epoch},
          {"early_stop", c.early_stop},
          {"stop_accuracy", c.stop_accuracy},
          {"eval_subset", c.eval_subset},
          {"prime_k", c.prime_k},
          {"prime_width", c.prime_width},
          {"probe_size", c.probe_size},
          {"probe_width", c.probe_width}};
}

training::TrainConfig train_config_from_json(const json& j) {
  training::TrainConfig c;
  c.model = model_config_from_json(j.at("model"));
  c.optim = adamw_config_from_json(j.at("optim"));
  c.split = j.at("split").get<double>();
  c.batch = j.at("batch").get<std::size_t>();
  c.epochs = j.at("epochs").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.width = j.at("width").get<int>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.checkpoint_every_epoch = j.at("checkpoint_every_epoch").get<bool>();
  c.early_stop = j.at("early_stop").get<bool>();
  c.stop_accuracy = j.at("stop_accuracy").get<double>();
  c.eval_subset = j.at("eval_subset").get<std::size_t>();
  c.prime_k = j.at("prime_k").get<std::size_t>();
  c.prime_width = j.at("prime_width").get<int>();
  c.probe_size = j.value("probe_size", std::size_t{0});
  c.probe_width = j.value("probe_width", 0);
  return c;
}

json to_json(const training::TaskAccuracyTable& t) {
  json rows = json::array();
  for (std::size_t g = 0; g < t.groups.size(); ++g)
    rows.push_back({{"group", t.groups[g]},
                    {"count", t.counts[g]},
                    {"accuracy", t.accuracy[g]},
                    {"corrected", t.corrected[g]},
                    {"exact", t.exact[g]}});
  return {{"positions", t.positions}, {"rows", rows}};
}

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace carry
