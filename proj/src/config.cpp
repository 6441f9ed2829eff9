#include "promptseg/config.hpp"

#include "promptseg/errors.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>

namespace promptseg {

namespace {

struct Binding {
  std::string description;
  std::function<void(AppConfig&, const YAML::Node&)> set;
  std::function<YAML::Node(const AppConfig&)> get;
};

template <class T, class Access>
Binding bind(std::string description, Access access) {
  Binding b;
  b.description = std::move(description);
  b.set = [access](AppConfig& c, const YAML::Node& n) { access(c) = n.as<T>(); };
  b.get = [access](const AppConfig& c) {
    const T& v = access(const_cast<AppConfig&>(c));
    if constexpr (std::is_same_v<T, double>) {
      // Shortest form that still parses back to the same double.
      char buf[32];
      const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
      return YAML::Node(std::string(buf, end));
    } else {
      return YAML::Node(v);
    }
  };
  return b;
}

const std::map<std::string, Binding>& registry() {
  static const std::map<std::string, Binding> keys = [] {
    std::map<std::string, Binding> k;
    using C = AppConfig;
    k["geometry"] = bind<std::string>("geometry preset: paper | desk", [](C& c) -> auto& { return c.train.geometry; });
    k["seed"] = bind<std::uint64_t>("global random seed", [](C& c) -> auto& { return c.train.seed; });
    k["model.num_classes"] = bind<int>("number of classes", [](C& c) -> auto& { return c.train.num_classes; });
    k["model.tokens_per_class"] = bind<int>("learnable tokens per class (>= 3)", [](C& c) -> auto& { return c.train.tokens_per_class; });

    k["optim.lr_ppn"] = bind<double>("prompt predictor learning rate", [](C& c) -> auto& { return c.train.lr_ppn; });
    k["optim.lr_decoder"] = bind<double>("mask decoder learning rate", [](C& c) -> auto& { return c.train.lr_decoder; });
    k["optim.weight_decay"] = bind<double>("decoupled weight decay", [](C& c) -> auto& { return c.train.weight_decay; });
    k["optim.batch_size"] = bind<int>("samples per step", [](C& c) -> auto& { return c.train.batch_size; });
    k["optim.max_steps"] = bind<int>("optimizer steps", [](C& c) -> auto& { return c.train.max_steps; });

    k["freeze.mode"] = Binding{"ppn_only | ppn_plus_lora_decoder | full_decoder",
                               [](C& c, const YAML::Node& n) { c.train.freeze.mode = parse_freeze_mode(n.as<std::string>()); },
                               [](const C& c) { return YAML::Node(to_string(c.train.freeze.mode)); }};
    k["freeze.lora_rank"] = bind<int>("LoRA rank", [](C& c) -> auto& { return c.train.freeze.lora_rank; });
    k["freeze.lora_alpha"] = bind<double>("LoRA alpha", [](C& c) -> auto& { return c.train.freeze.lora_alpha; });

    k["loss.lambda1"] = bind<double>("mask loss weight", [](C& c) -> auto& { return c.train.loss.lambda1; });
    k["loss.lambda2"] = bind<double>("box loss weight", [](C& c) -> auto& { return c.train.loss.lambda2; });
    k["loss.lambda3"] = bind<double>("objectness loss weight", [](C& c) -> auto& { return c.train.loss.lambda3; });
    k["loss.gamma"] = bind<double>("focal exponent", [](C& c) -> auto& { return c.train.loss.gamma; });
    k["loss.alpha"] = bind<double>("focal background weight", [](C& c) -> auto& { return c.train.loss.alpha; });

    k["augment.enabled"] = bind<bool>("apply augmentation during training", [](C& c) -> auto& { return c.train.augment; });
    k["augment.p_flip_h"] = bind<double>("horizontal flip probability", [](C& c) -> auto& { return c.train.augmentation.p_flip_h; });
    k["augment.p_flip_v"] = bind<double>("vertical flip probability", [](C& c) -> auto& { return c.train.augmentation.p_flip_v; });
    k["augment.p_translate"] = bind<double>("translation probability", [](C& c) -> auto& { return c.train.augmentation.p_translate; });
    k["augment.p_rotate"] = bind<double>("rotation probability", [](C& c) -> auto& { return c.train.augmentation.p_rotate; });
    k["augment.p_crop"] = bind<double>("resized crop probability", [](C& c) -> auto& { return c.train.augmentation.p_crop; });
    k["augment.translate_frac"] = bind<double>("max translation, fraction of side", [](C& c) -> auto& { return c.train.augmentation.translate_frac; });
    k["augment.rotate_min_deg"] = bind<double>("rotation range start", [](C& c) -> auto& { return c.train.augmentation.rotate_min_deg; });
    k["augment.rotate_max_deg"] = bind<double>("rotation range end", [](C& c) -> auto& { return c.train.augmentation.rotate_max_deg; });
    k["augment.crop_scale_min"] = bind<double>("smallest crop side fraction", [](C& c) -> auto& { return c.train.augmentation.crop_scale_min; });
    k["augment.crop_scale_max"] = bind<double>("largest crop side fraction", [](C& c) -> auto& { return c.train.augmentation.crop_scale_max; });

    k["data.train"] = bind<std::string>("training dataset directory", [](C& c) -> auto& { return c.train.train_data; });
    k["data.train_split"] = bind<std::string>("optional file of training stems", [](C& c) -> auto& { return c.train.train_split; });
    k["data.backbone"] = bind<std::string>("backbone archive loaded before training", [](C& c) -> auto& { return c.train.backbone; });

    k["train.out_dir"] = bind<std::string>("checkpoint and metrics directory", [](C& c) -> auto& { return c.train.out_dir; });
    k["train.checkpoint_every"] = bind<int>("steps between checkpoints (0 = end only)", [](C& c) -> auto& { return c.train.checkpoint_every; });
    k["train.resume"] = bind<std::string>("checkpoint to resume from", [](C& c) -> auto& { return c.train.resume; });
    k["train.few_shot_k"] = bind<int>("few-shot sample count", [](C& c) -> auto& { return c.train.few_shot_k; });

    k["pretrain.steps"] = bind<int>("backbone pretraining steps", [](C& c) -> auto& { return c.pretrain.config.steps; });
    k["pretrain.batch_size"] = bind<int>("backbone pretraining batch", [](C& c) -> auto& { return c.pretrain.config.batch_size; });
    k["pretrain.lr"] = bind<double>("backbone pretraining learning rate", [](C& c) -> auto& { return c.pretrain.config.lr; });
    k["pretrain.synth_count"] = bind<int>("synthetic images generated for pretraining", [](C& c) -> auto& { return c.pretrain.config.synth_count; });
    k["pretrain.augment"] = bind<bool>("augment pretraining samples", [](C& c) -> auto& { return c.pretrain.config.augment; });
    k["pretrain.out"] = bind<std::string>("backbone archive path", [](C& c) -> auto& { return c.pretrain.out; });

    k["eval.data"] = bind<std::string>("evaluation dataset directory", [](C& c) -> auto& { return c.eval.data; });
    k["eval.split"] = bind<std::string>("optional file of evaluation stems", [](C& c) -> auto& { return c.eval.split; });
    k["eval.checkpoint"] = bind<std::string>("model checkpoint to evaluate", [](C& c) -> auto& { return c.eval.checkpoint; });
    k["eval.mode"] = bind<std::string>("gt_box | learned | learned_plus_box | cosine_baseline", [](C& c) -> auto& { return c.eval.mode; });
    k["eval.model_tag"] = bind<std::string>("model label in the metrics table", [](C& c) -> auto& { return c.eval.model_tag; });
    k["eval.dataset_tag"] = bind<std::string>("dataset label in the metrics table", [](C& c) -> auto& { return c.eval.dataset_tag; });

    k["serve.host"] = bind<std::string>("bind address", [](C& c) -> auto& { return c.serve.host; });
    k["serve.port"] = bind<int>("listen port", [](C& c) -> auto& { return c.serve.port; });
    k["serve.checkpoint"] = bind<std::string>("model checkpoint to serve", [](C& c) -> auto& { return c.serve.checkpoint; });
    k["serve.session_ttl_seconds"] = bind<int>("idle session lifetime", [](C& c) -> auto& { return c.serve.session_ttl_seconds; });
    k["serve.max_image_bytes"] = bind<std::size_t>("largest accepted PNG payload", [](C& c) -> auto& { return c.serve.max_image_bytes; });
    k["serve.max_image_side"] = bind<int>("largest accepted image side in pixels", [](C& c) -> auto& { return c.serve.max_image_side; });
    k["serve.threads"] = bind<int>("HTTP worker threads", [](C& c) -> auto& { return c.serve.threads; });
    return k;
  }();
  return keys;
}

void flatten(const YAML::Node& node, const std::string& prefix, std::vector<std::pair<std::string, YAML::Node>>& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
    }
  } else if (node.IsNull()) {
    out.emplace_back(prefix, YAML::Node(std::string()));
  } else {
    out.emplace_back(prefix, node);
  }
}

void set_node(AppConfig& config, const std::string& key, const YAML::Node& value) {
  const auto& keys = registry();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  if (!value.IsScalar()) throw ConfigError("config key '" + key + "' expects a scalar value");
  try {
    it->second.set(config, value);
  } catch (const YAML::Exception&) {
    throw ConfigError("config key '" + key + "': cannot parse value '" + value.Scalar() + "'");
  }
}

}  // namespace

std::vector<ConfigKey> config_keys() {
  std::vector<ConfigKey> out;
  for (const auto& [name, b] : registry()) out.push_back({name, b.description});
  return out;
}

void set_value(AppConfig& config, const std::string& key, const std::string& value) {
  YAML::Node n;
  try {
    n = value.empty() ? YAML::Node(std::string()) : YAML::Load(value);
  } catch (const YAML::Exception&) {
    n = YAML::Node(value);
  }
  if (n.IsNull()) n = YAML::Node(std::string());
  set_node(config, key, n);
}

void apply_override(AppConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  set_value(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::string get_value(const AppConfig& config, const std::string& key) {
  auto it = registry().find(key);
  if (it == registry().end()) throw ConfigError("unknown config key '" + key + "'");
  YAML::Emitter e;
  e << it->second.get(config);
  return e.c_str();
}

AppConfig parse_config(const std::string& text, const AppConfig& base) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("config syntax error at line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  AppConfig config = base;
  if (root.IsNull()) return config;
  if (!root.IsMap()) throw ConfigError("config root must be a mapping");
  std::vector<std::pair<std::string, YAML::Node>> flat;
  flatten(root, "", flat);
  for (const auto& [key, value] : flat) set_node(config, key, value);
  return config;
}

AppConfig load_config(const std::filesystem::path& path, const AppConfig& base) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string dump_config(const AppConfig& config) {
  YAML::Node root(YAML::NodeType::Map);
  for (const auto& [name, b] : registry()) {
    std::vector<std::string> parts;
    std::string rest = name;
    for (std::size_t p; (p = rest.find('.')) != std::string::npos; rest = rest.substr(p + 1)) parts.push_back(rest.substr(0, p));
    // Intermediate maps must exist before children attach to them.
    YAML::Node cur = root;
    for (const auto& part : parts) {
      if (!cur[part]) cur[part] = YAML::Node(YAML::NodeType::Map);
      YAML::Node next = cur[part];
      cur.reset(next);
    }
    cur[rest] = b.get(config);
  }
  YAML::Emitter e;
  e << root;
  return std::string(e.c_str()) + "\n";
}

}  // namespace promptseg
