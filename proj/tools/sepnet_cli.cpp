/* Copyright (c) 2026 The sepnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

// sepnet command-line tool: train, binarize, fine-tune, quantize, evaluate
// and report on models.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
// missing files, commands applied out of order).

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "sepnet/arch.hpp"
#include "sepnet/compress.hpp"
#include "sepnet/gemm.hpp"
#include "sepnet/model_store.hpp"
#include "sepnet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace sepnet;

namespace {

struct Options {
  std::string command;
  std::string arch;
  std::string data;
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string scope = "k>1";
  std::string granularity = "per-filter";
  std::string in, out;
  int threads = 0;
  std::string precision = "f32";
  std::size_t width_divisor = 1;
  bool per_channel = false;
};

// Flags and on-disk configuration merged into one validated record.
struct Resolved {
  TrainConfig train;
  DatasetSpec data;
  Scope scope;
  AlphaGranularity granularity = AlphaGranularity::PerFilter;
};

AlphaGranularity parse_granularity(const std::string& s) {
  if (s == "per-filter") return AlphaGranularity::PerFilter;
  if (s == "per-kernel") return AlphaGranularity::PerKernel;
  throw UsageError("granularity must be per-filter or per-kernel, got '" + s + "'");
}

const char* granularity_name(AlphaGranularity g) {
  return g == AlphaGranularity::PerFilter ? "per-filter" : "per-kernel";
}

void require_file(const std::string& flag, const std::string& path) {
  if (path.empty()) throw UsageError(flag + " is required");
  if (!fs::exists(path)) throw UsageError(flag + " '" + path + "' does not exist");
}

void require_flag(const std::string& flag, const std::string& value) {
  if (value.empty()) throw UsageError(flag + " is required");
}

/// Reads a JSON config on top of the defaults. Unknown keys are usage errors.
void apply_config(const std::string& path, Resolved& r, Options& o) {
  std::ifstream f(path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  auto& t = r.train;
  try {
    for (auto& [k, v] : j.items()) {
      if (k == "base_lr") t.base_lr = v.get<double>();
      else if (k == "momentum") t.momentum = v.get<double>();
      else if (k == "weight_decay") t.weight_decay = v.get<double>();
      else if (k == "batch_size") t.batch_size = v.get<std::size_t>();
      else if (k == "max_iter") t.max_iter = v.get<std::size_t>();
      else if (k == "seed") t.seed = v.get<std::uint64_t>();
      else if (k == "log_every") t.log_every = v.get<std::size_t>();
      else if (k == "finetune_lr_factor") t.finetune_lr_factor = v.get<double>();
      else if (k == "finetune_iter") t.finetune_iter = v.get<std::size_t>();
      else if (k == "decay_scales_and_bn") t.decay_scales_and_bn = v.get<bool>();
      else if (k == "width_divisor") o.width_divisor = v.get<std::size_t>();
      else if (k == "schedule") {
        for (auto& [sk, sv] : v.items()) {
          if (sk == "kind") {
            const auto kind = sv.get<std::string>();
            if (kind == "step") t.schedule.kind = LrSchedule::Kind::Step;
            else if (kind == "poly") t.schedule.kind = LrSchedule::Kind::Polynomial;
            else throw UsageError("schedule.kind must be step or poly");
          } else if (sk == "milestones") {
            t.schedule.milestones = sv.get<std::vector<std::size_t>>();
          } else if (sk == "factor") {
            t.schedule.factor = sv.get<double>();
          } else if (sk == "power") {
            t.schedule.power = sv.get<double>();
          } else {
            throw UsageError("unknown config key 'schedule." + sk + "'");
          }
        }
      } else if (k == "dataset") {
        for (auto& [dk, dv] : v.items()) {
          if (dk == "gcn") r.data.gcn = dv.get<bool>();
          else if (dk == "zca") r.data.zca = dv.get<bool>();
          else if (dk == "zca_epsilon") r.data.zca_epsilon = dv.get<double>();
          else if (dk == "pad") r.data.augment.pad = dv.get<std::size_t>();
          else if (dk == "random_crop") r.data.augment.random_crop = dv.get<bool>();
          else if (dk == "mirror") r.data.augment.mirror = dv.get<bool>();
          else throw UsageError("unknown config key 'dataset." + dk + "'");
        }
      } else {
        throw UsageError("unknown config key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
}

json to_json(const Options& o, const Resolved& r) {
  const auto& t = r.train;
  json j;
  j["command"] = o.command;
  if (!o.arch.empty()) j["arch"] = o.arch;
  if (!o.data.empty()) j["data"] = o.data;
  if (!o.in.empty()) j["in"] = o.in;
  if (!o.out.empty()) j["out"] = o.out;
  j["precision"] = o.precision;
  j["threads"] = o.threads;
  j["scope"] = r.scope.text;
  j["granularity"] = granularity_name(r.granularity);
  j["width_divisor"] = o.width_divisor;
  j["per_channel"] = o.per_channel;
  j["train"] = {
      {"base_lr", t.base_lr},
      {"schedule",
       {{"kind", t.schedule.kind == LrSchedule::Kind::Step ? "step" : "poly"},
        {"milestones", t.schedule.milestones},
        {"factor", t.schedule.factor},
        {"power", t.schedule.power}}},
      {"momentum", t.momentum},
      {"weight_decay", t.weight_decay},
      {"batch_size", t.batch_size},
      {"max_iter", t.max_iter},
      {"seed", t.seed},
      {"log_every", t.log_every},
      {"finetune_lr_factor", t.finetune_lr_factor},
      {"finetune_iter", t.finetune_iter},
      {"decay_scales_and_bn", t.decay_scales_and_bn}};
  j["dataset"] = {{"gcn", r.data.gcn},
                  {"zca", r.data.zca},
                  {"zca_epsilon", r.data.zca_epsilon},
                  {"pad", r.data.augment.pad},
                  {"random_crop", r.data.augment.random_crop},
                  {"mirror", r.data.augment.mirror}};
  return j;
}

void log_row(const TrainLogRow& row) { std::cout << format_log_row(row) << '\n' << std::flush; }

DataSplits load_data(const Options& o, const Resolved& r) {
  auto splits = load_splits(o.data);
  preprocess(splits, r.data);
  return splits;
}

template <typename T>
void report_eval(const char* tag, const EvalResult& e) {
  std::cout << tag << "\ttop1=" << e.top1 << "\ttop5=" << e.top5 << "\tloss=" << e.loss
            << "\tcount=" << e.count << '\n';
}

template <typename T>
int run(const Options& o, const Resolved& r) {
  const std::string& c = o.command;
  if (c == "train") {
    auto data = load_data(o, r);
    auto desc = build_named(o.arch, data.train.classes, data.train.image_shape, o.width_divisor);
    Network<T> net(desc);
    net.init_parameters(r.train.seed);
    run_step(net, PipelineStep::FullTrain, data.train, r.data.augment, r.train, {}, log_row);
    report_eval<T>("eval", evaluate(net, data.test));
    std::cout << "saved\t" << save(net, o.out) << " bytes\n";
  } else if (c == "binarize") {
    auto net = load<T>(o.in);
    if (net.stage() != Stage::Full) {
      throw UsageError("binarize requires a Full model, got " + std::string(stage_name(net.stage())));
    }
    auto rep = binarize_network(net, r.scope, r.granularity);
    std::cout << rep.to_tsv();
    std::cout << "saved\t" << save(net, o.out) << " bytes\n";
  } else if (c == "finetune") {
    auto net = load<T>(o.in);
    auto data = load_data(o, r);
    run_step(net, PipelineStep::Finetune, data.train, r.data.augment, r.train, {}, log_row);
    report_eval<T>("eval", evaluate(net, data.test));
    std::cout << "saved\t" << save(net, o.out) << " bytes\n";
  } else if (c == "quantize") {
    auto net = load<T>(o.in);
    if (net.stage() != Stage::BiPattern && net.stage() != Stage::Refined) {
      throw UsageError("quantize requires a BiPattern or Refined model, got " +
                       std::string(stage_name(net.stage())));
    }
    const auto n = quantize8(net, o.per_channel);
    std::cout << "quantized\t" << n << " tensors\n";
    std::cout << "saved\t" << save(net, o.out) << " bytes\n";
  } else if (c == "eval") {
    auto net = load<T>(o.in);
    auto data = load_data(o, r);
    std::cout << "stage\t" << stage_name(net.stage()) << '\n';
    report_eval<T>("eval", evaluate(net, data.test));
  } else if (c == "report-params") {
    Network<T> net = o.in.empty() ? Network<T>(build_named(o.arch, 0, std::nullopt, o.width_divisor))
                                  : load<T>(o.in);
    const std::size_t full = count_params(net, CountMode::Full);
    if (net.stage() == Stage::Full) binarize_network(net, r.scope, r.granularity);
    std::cout << "network\t" << net.descriptor().name << '\n'
              << "full\t" << full << '\n'
              << "effective\t" << count_params(net, CountMode::Effective) << '\n';
  } else if (c == "report-qerror") {
    Network<T> net = o.in.empty() ? Network<T>(build_named(o.arch, 0, std::nullopt, o.width_divisor))
                                  : load<T>(o.in);
    if (o.in.empty()) net.init_parameters(r.train.seed);
    std::cout << quantization_error_report(net, r.granularity).to_tsv();
  } else if (c == "report-size") {
    const auto desc = o.in.empty() ? build_named(o.arch, 0, std::nullopt, o.width_divisor)
                                   : load<float>(o.in).descriptor();
    std::cout << size_report(desc, r.scope, r.granularity, o.per_channel).to_tsv();
  } else if (c == "export-descriptor") {
    const auto text = o.in.empty()
                          ? write_descriptor(build_named(o.arch, 0, std::nullopt, o.width_divisor), Stage::Full)
                          : [&] {
                              auto net = load<float>(o.in);
                              return write_descriptor(net.descriptor(), net.stage());
                            }();
    if (o.out.empty()) {
      std::cout << text;
    } else {
      std::ofstream f(o.out);
      f << text;
      if (!f) throw InputError("cannot write '" + o.out + "'");
    }
  }
  return 0;
}

// Validates flag combinations before any compute.
void check_flags(const Options& o) {
  const std::string& c = o.command;
  const bool needs_in = c == "binarize" || c == "finetune" || c == "quantize" || c == "eval";
  const bool needs_out = c == "train" || c == "binarize" || c == "finetune" || c == "quantize";
  const bool needs_data = c == "train" || c == "finetune" || c == "eval";
  const bool arch_or_in = c == "report-params" || c == "report-qerror" || c == "report-size" ||
                          c == "export-descriptor";
  if (c == "train") require_flag("--arch", o.arch);
  if (needs_in) require_file("--in", o.in);
  if (needs_out) require_flag("--out", o.out);
  if (needs_data) require_file("--data", o.data);
  if (arch_or_in) {
    if (o.arch.empty() == o.in.empty()) throw UsageError(c + " needs exactly one of --arch or --in");
    if (!o.in.empty()) require_file("--in", o.in);
  }
  if (!o.arch.empty()) (void)build_named(o.arch, 0, std::nullopt, o.width_divisor);
  if (o.precision != "f32" && o.precision != "f64") throw UsageError("--precision must be f32 or f64");
  if (o.threads < 0) throw UsageError("--threads must be >= 0");
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"sepnet: pattern-binarized compact CNNs"};
  app.require_subcommand(1, 1);
  auto add_common = [&](CLI::App* s) {
    s->add_option("--arch", o.arch, "sepnet-small | sepnet-large | resnet20 | resnet32 | resnet44 | resnet56");
    s->add_option("--data", o.data, "dataset directory");
    s->add_option("--config", o.config, "JSON training configuration")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "random seed")->each([&](const std::string&) { o.seed_set = true; });
    s->add_option("--scope", o.scope, "binarization scope: k>N, k>=N, k==N or prb");
    s->add_option("--granularity", o.granularity, "per-filter | per-kernel scales");
    s->add_option("--in", o.in, "input model file");
    s->add_option("--out", o.out, "output file");
    s->add_option("--threads", o.threads, "compute threads (0: library default)");
    s->add_option("--precision", o.precision, "f32 | f64");
    s->add_option("--width-divisor", o.width_divisor, "divide SEP-Net channel counts");
    s->add_flag("--per-channel", o.per_channel, "per-channel 8-bit scales");
  };
  const std::pair<const char*, const char*> commands[] = {
      {"train", "train a full-precision model from --arch on --data"},
      {"binarize", "replace in-scope kxk filters with scaled sign patterns"},
      {"finetune", "retrain scales and full-precision weights with patterns frozen"},
      {"quantize", "8-bit quantize every remaining full-precision tensor"},
      {"eval", "report top-1/top-5 and loss on the test split"},
      {"report-params", "full and effective parameter counts"},
      {"report-qerror", "per-layer binarization error, aggregated by kernel size"},
      {"report-size", "stored bytes per layer for the R, B and BQ forms"},
      {"export-descriptor", "write the text network descriptor"},
  };
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  o.command = app.get_subcommands().front()->get_name();

  Resolved r;
  try {
    r.train.seed = 0;
    if (!o.config.empty()) apply_config(o.config, r, o);
    if (o.seed_set) r.train.seed = o.seed;
    r.scope = parse_scope(o.scope);
    r.granularity = parse_granularity(o.granularity);
    r.train.validate();
    r.data.validate();
    check_flags(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  std::cerr << "config: " << to_json(o, r).dump() << '\n';
  set_compute_threads(o.threads);
  try {
    return o.precision == "f64" ? run<double>(o, r) : run<float>(o, r);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
