#include "promptseg/cli.hpp"

#include "promptseg/checkpoint.hpp"
#include "promptseg/config.hpp"
#include "promptseg/errors.hpp"
#include "promptseg/eval.hpp"
#include "promptseg/image_io.hpp"
#include "promptseg/service.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>

namespace promptseg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Options shared by every config-driven subcommand.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::vector<std::string> flag_overrides;  // synthesized from dedicated flags

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "YAML configuration file");
    cmd->add_option("overrides", overrides, "dotted key=value overrides, applied after the file");
  }

  /// Registers a flag that maps onto a config key.
  void flag(CLI::App* cmd, const std::string& name, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(
        name, [this, key](const std::string& v) { flag_overrides.push_back(key + "=" + v); }, help);
  }

  AppConfig resolve() const {
    AppConfig cfg;
    if (!config_path.empty()) {
      if (!fs::is_regular_file(config_path)) throw UsageError("config file not found: " + config_path);
      cfg = load_config(config_path);
    }
    for (const auto& o : flag_overrides) apply_override(cfg, o);
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
  }
};

ProgressFn progress_printer(std::ostream& err, int every) {
  return [&err, every](long long step, const LossReport& r) {
    if (step % every == 0) err << "step " << step << " loss " << r.total << "\n" << std::flush;
  };
}

void report_training(const TrainOutcome& o, std::ostream& out) {
  out << "checkpoint\t" << o.checkpoint << "\n"
      << "final_step\t" << o.final_step << "\n"
      << "trainable_params\t" << o.census.trainable << "\n"
      << "frozen_params\t" << o.census.frozen << "\n"
      << "frozen_intact\t" << (o.frozen_intact ? "true" : "false") << "\n";
  if (!o.frozen_intact) throw TrainingError("a frozen tensor changed during training");
}

std::vector<double> parse_numbers(const std::string& text, const char* what) {
  std::vector<double> v;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError(std::string("cannot parse ") + what + " '" + text + "'");
    }
  }
  return v;
}

std::string one_line(std::string text) {
  while (!text.empty() && text.back() == '\n') text.pop_back();
  for (std::size_t p; (p = text.find('\n')) != std::string::npos;) text.replace(p, 1, "; ");
  return text;
}

int dispatch(CLI::App& app, std::ostream& out, std::ostream& err, const std::vector<std::string>& args) {
  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::uint64_t synth_seed = 0;
  int synth_count = 0;
  double empty_fraction = 0.2;
  std::string synth_out;
  SynthOptions synth_opts;
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--count", synth_count, "number of images")->required()->check(CLI::PositiveNumber);
  synth->add_option("--empty-fraction", empty_fraction, "fraction of images without any object")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--classes", synth_opts.num_classes, "object classes")->check(CLI::PositiveNumber);
  synth->add_option("--width", synth_opts.width, "image width")->check(CLI::PositiveNumber);
  synth->add_option("--height", synth_opts.height, "image height")->check(CLI::PositiveNumber);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "pretrain the backbone on synthetic data with manual prompts");
  ConfigArgs pre_args;
  pre_args.attach(pretrain);
  pre_args.flag(pretrain, "--seed", "seed", "random seed");
  pre_args.flag(pretrain, "--steps", "pretrain.steps", "optimizer steps");
  pre_args.flag(pretrain, "--out", "pretrain.out", "backbone archive to write");

  // train / few-shot
  auto* train_cmd = app.add_subcommand("train", "train the prompt predictor");
  auto* few_cmd = app.add_subcommand("few-shot", "train on k samples drawn from the dataset");
  ConfigArgs train_args, few_args;
  for (auto [cmd, ca] : {std::pair{train_cmd, &train_args}, std::pair{few_cmd, &few_args}}) {
    ca->attach(cmd);
    ca->flag(cmd, "--seed", "seed", "random seed");
    ca->flag(cmd, "--data", "data.train", "training dataset directory");
    ca->flag(cmd, "--backbone", "data.backbone", "backbone archive");
    ca->flag(cmd, "--out", "train.out_dir", "output directory");
    ca->flag(cmd, "--steps", "optim.max_steps", "optimizer steps");
    ca->flag(cmd, "--resume", "train.resume", "checkpoint to resume from");
  }
  few_args.flag(few_cmd, "--k", "train.few_shot_k", "number of training samples");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset");
  ConfigArgs eval_args;
  std::string image_table;
  eval_args.attach(eval_cmd);
  eval_args.flag(eval_cmd, "--mode", "eval.mode", "gt_box | learned | learned_plus_box | cosine_baseline");
  eval_args.flag(eval_cmd, "--checkpoint", "eval.checkpoint", "model checkpoint");
  eval_args.flag(eval_cmd, "--data", "eval.data", "dataset directory");
  eval_args.flag(eval_cmd, "--split", "eval.split", "file of stems to evaluate");
  eval_args.flag(eval_cmd, "--model-tag", "eval.model_tag", "model label");
  eval_args.flag(eval_cmd, "--dataset-tag", "eval.dataset_tag", "dataset label");
  eval_cmd->add_option("--images", image_table, "also write per-image scores to this TSV file");

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "segment one image");
  std::string pred_ckpt, pred_image, pred_out, pred_mode = "auto";
  int pred_class = 0;
  std::vector<std::string> pred_boxes, pred_points;
  predict_cmd->add_option("--checkpoint", pred_ckpt, "model checkpoint")->required();
  predict_cmd->add_option("--image", pred_image, "input PNG")->required();
  predict_cmd->add_option("--mode", pred_mode, "auto | manual | semi")
      ->check(CLI::IsMember({"auto", "manual", "semi"}));
  predict_cmd->add_option("--class", pred_class, "class id");
  predict_cmd->add_option("--box", pred_boxes, "box prompt x1,y1,x2,y2 in pixels (repeatable)");
  predict_cmd->add_option("--point", pred_points, "point prompt x,y[,0|1] in pixels; 1 = foreground (repeatable)");
  predict_cmd->add_option("--out", pred_out, "write the mask PNG here");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP inference service");
  ConfigArgs serve_args;
  serve_args.attach(serve_cmd);
  serve_args.flag(serve_cmd, "--checkpoint", "serve.checkpoint", "model checkpoint");
  serve_args.flag(serve_cmd, "--host", "serve.host", "bind address");
  serve_args.flag(serve_cmd, "--port", "serve.port", "listen port");

  // config
  auto* config_cmd = app.add_subcommand("config", "print the effective configuration or the key schema");
  ConfigArgs config_args;
  bool list_keys = false;
  config_args.attach(config_cmd);
  config_cmd->add_flag("--keys", list_keys, "list every key with its description");

  app.require_subcommand(1);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  app.parse(reversed);

  if (synth->parsed()) {
    const Dataset d = synth_generate(synth_seed, synth_count, empty_fraction, synth_opts);
    save_dataset(d, synth_out);
    out << "wrote " << d.size() << " samples to " << synth_out << "\n";
    return 0;
  }

  if (pretrain->parsed()) {
    const AppConfig cfg = pre_args.resolve();
    PretrainConfig pc = cfg.pretrain.config;
    pc.seed = cfg.train.seed;
    pc.geometry = cfg.train.geometry;
    const auto backbone = pretrain_synthetic(pc, progress_printer(err, 100));
    save_backbone(cfg.pretrain.out, *backbone, json{{"pretrain_steps", pc.steps}, {"seed", pc.seed}});
    out << "backbone\t" << cfg.pretrain.out << "\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    const AppConfig cfg = train_args.resolve();
    report_training(train(cfg.train, progress_printer(err, 100)), out);
    return 0;
  }

  if (few_cmd->parsed()) {
    const AppConfig cfg = few_args.resolve();
    report_training(few_shot_train(cfg.train, progress_printer(err, 100)), out);
    return 0;
  }

  if (eval_cmd->parsed()) {
    const AppConfig cfg = eval_args.resolve();
    const EvalConfig& ec = cfg.eval;
    if (ec.checkpoint.empty()) throw UsageError("eval needs --checkpoint (or eval.checkpoint)");
    if (ec.data.empty()) throw UsageError("eval needs --data (or eval.data)");
    const PromptMode mode = parse_prompt_mode(ec.mode);
    LoadedModel loaded = load_model(ec.checkpoint);
    const Model& model = *loaded.model;
    const Dataset raw = ec.split.empty() ? load_dataset(ec.data, model.config().num_classes)
                                         : load_dataset(ec.data, model.config().num_classes, ec.split);
    const Dataset data = to_model_space(raw, model.geometry());
    EvalOptions opts;
    opts.model_tag = ec.model_tag;
    opts.dataset_tag = ec.dataset_tag;
    const EvalResult r = evaluate(model, data, mode, opts);
    write_metrics_table(out, {r.row});
    err << format_report_line(r.row) << "\n";
    if (!image_table.empty()) {
      std::ofstream f(image_table);
      if (!f) throw LoadError("cannot write " + image_table);
      write_image_table(f, r.images);
    }
    return 0;
  }

  if (predict_cmd->parsed()) {
    LoadedModel loaded = load_model(pred_ckpt);
    ServeConfig sc;
    Service service(*loaded.model, sc);
    std::ifstream f(pred_image, std::ios::binary);
    if (!f) throw LoadError("cannot read image " + pred_image);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    json body{{"image", io::base64_encode(bytes)}, {"class_id", pred_class}, {"mode", pred_mode}};
    if (!pred_boxes.empty() || !pred_points.empty()) {
      json prompts{{"points", json::array()}, {"boxes", json::array()}};
      for (const auto& b : pred_boxes) {
        const auto v = parse_numbers(b, "box");
        if (v.size() != 4) throw UsageError("--box needs x1,y1,x2,y2");
        prompts["boxes"].push_back({{"x1", v[0]}, {"y1", v[1]}, {"x2", v[2]}, {"y2", v[3]}});
      }
      for (const auto& p : pred_points) {
        const auto v = parse_numbers(p, "point");
        if (v.size() != 2 && v.size() != 3) throw UsageError("--point needs x,y[,label]");
        const bool fg = v.size() == 2 || v[2] != 0.0;
        prompts["points"].push_back({{"x", v[0]}, {"y", v[1]}, {"label", fg ? "foreground" : "background"}});
      }
      body["prompts"] = prompts;
    }
    const HttpResponse r = service.predict(body.dump());
    json result = json::parse(r.body);
    if (r.status != 200) throw InputError(result.value("error", std::string("prediction failed")));
    const auto& m = result["mask"];
    const BinaryMask mask = rle_decode(m["counts"].get<std::vector<std::uint32_t>>(), m["height"], m["width"]);
    if (!pred_out.empty()) {
      io::Raster raster{mask.width, mask.height, 1, {}};
      raster.pixels.resize(mask.pixels.size());
      std::transform(mask.pixels.begin(), mask.pixels.end(), raster.pixels.begin(),
                     [](std::uint8_t v) { return v ? 255 : 0; });
      io::write_png(pred_out, raster);
    }
    result.erase("mask");
    result["foreground_pixels"] = mask.count();
    out << result.dump(2) << "\n";
    return 0;
  }

  if (serve_cmd->parsed()) {
    const AppConfig cfg = serve_args.resolve();
    return run_server(cfg.serve);
  }

  if (config_cmd->parsed()) {
    if (list_keys) {
      for (const auto& k : config_keys()) out << k.name << "\t" << k.description << "\n";
    } else {
      out << dump_config(config_args.resolve());
    }
    return 0;
  }
  return 2;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"promptseg: prompt-learning segmentation toolkit", "promptseg"};
  try {
    return dispatch(app, out, err, args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const UsageError& e) {
    err << "usage: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error[" << e.kind() << "]: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error[internal]: " << one_line(e.what()) << "\n";
    return 1;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace promptseg
