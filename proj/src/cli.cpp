#include "htr/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "htr/dataset.hpp"
#include "htr/errors.hpp"
#include "htr/gradcheck.hpp"
#include "htr/log.hpp"
#include "htr/trainer.hpp"

namespace htr::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Source { fallback, file, flag };

/// One named value of a subcommand. `--some-key` on the command line,
/// `some_key = ...` in a config file.
struct Setting {
  std::string key;
  std::string help;
  std::string fallback;  // empty and !required means "unset"
  bool required = false;
  bool is_flag = false;   // boolean switch
  bool repeated = false;  // may be given several times on the command line
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

template <typename V>
std::string show(V v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

class Settings {
 public:
  void set(const std::string& key, std::vector<std::string> values, Source src) { values_[key] = {std::move(values), src}; }

  bool has(const std::string& key) const {
    auto it = values_.find(key);
    return it != values_.end() && !it->second.first.empty();
  }
  bool given(const std::string& key) const { return has(key) && values_.at(key).second != Source::fallback; }

  const std::string& str(const std::string& key) const {
    if (!has(key)) throw UsageError("missing required option " + dashed(key));
    return values_.at(key).first.back();
  }
  const std::vector<std::string>& list(const std::string& key) const {
    if (!has(key)) throw UsageError("missing required option " + dashed(key));
    return values_.at(key).first;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw UsageError(dashed(key) + ": expected a number, got '" + s + "'");
    return v;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) {
      throw UsageError(dashed(key) + ": expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }
  std::size_t count(const std::string& key) const { return std::size_t(u64(key)); }

  bool boolean(const std::string& key) const {
    if (!has(key)) return false;
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw UsageError(dashed(key) + ": expected true or false, got '" + s + "'");
  }

 private:
  std::map<std::string, std::pair<std::vector<std::string>, Source>> values_;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// `key = value` lines; '#' starts a comment.
std::map<std::string, std::string> read_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError(where + ": empty key");
    if (!out.emplace(key, trim(line.substr(eq + 1))).second) throw UsageError(where + ": duplicate key '" + key + "'");
  }
  return out;
}

struct Command {
  std::string name;
  std::string help;
  std::vector<Setting> settings;
  std::function<int(const Settings&, std::ostream&, std::ostream&)> action;
};

// ---- synth

int do_synth(const Settings& s, std::ostream& out, std::ostream&) {
  const auto seed = s.u64("seed");
  const auto count = s.count("count");
  const double noise = s.real("noise");
  if (noise < 0) throw UsageError("--noise must be non-negative");
  const auto lexicon = load_lexicon(s.str("lexicon"));
  GlyphSet glyphs;
  if (s.has("glyphs")) {
    glyphs = GlyphSet::load(s.str("glyphs"));
  } else {
    std::u32string chars;
    for (const auto& line : lexicon) chars += utf8_to_u32(line);
    glyphs = GlyphSet::procedural(chars, seed);
  }
  if (s.has("save_glyphs")) glyphs.save(s.str("save_glyphs"));
  const std::filesystem::path dir = s.str("out");
  const auto entries = synthesize_corpus(lexicon, glyphs, count, seed, noise, dir);
  out << "wrote " << entries.size() << " lines and " << (dir / "manifest.tsv").string() << '\n';
  return kExitOk;
}

// ---- train

const std::vector<Setting>& train_settings() {
  static const std::vector<Setting> settings = [] {
    const TrainConfig t;
    const ModelConfig m;
    return std::vector<Setting>{
        {"manifest", "training manifest (TSV)", "", true},
        {"out", "output directory for checkpoint.htr and train_log.jsonl", "", true},
        {"resume", "checkpoint to continue from; its configs are reused", ""},
        {"learning_rate", "Adam learning rate", show(t.learning_rate)},
        {"max_steps", "number of optimizer steps", show(t.max_steps)},
        {"batch_size", "lines per batch", show(t.batch_size)},
        {"eval_every", "validate and checkpoint every N steps (0: only at the end)", show(t.eval_every)},
        {"seed", "seed for initialization, splits, batching and dropout", show(t.seed)},
        {"val_fraction", "share of lines held out for validation", show(t.val_fraction)},
        {"grad_clip", "global gradient-norm bound", show(t.grad_clip)},
        {"width_scale", "ResNet channel multiplier", show(m.resnet.width_scale)},
        {"proj_depth", "linear layers between ResNet and transformer", show(m.proj_depth)},
        {"d_model", "transformer width", show(m.transformer.d_model)},
        {"n_heads", "attention heads", show(m.transformer.n_heads)},
        {"enc_layers", "transformer encoder layers", show(m.transformer.enc_layers)},
        {"dec_layers", "transformer decoder layers", show(m.transformer.dec_layers)},
        {"d_ff", "feed-forward width", show(m.transformer.d_ff)},
        {"dropout", "dropout rate", show(m.transformer.dropout)},
        {"max_target_len", "longest decodable token sequence", show(m.transformer.max_target_len)},
        {"binarize", "apply Otsu binarization to every image", "false", false, true},
    };
  }();
  return settings;
}

int do_train(const Settings& s, std::ostream& out, std::ostream&) {
  ModelConfig model;
  TrainConfig train;
  FitOptions options;
  options.out_dir = s.str("out");
  if (s.has("resume")) {
    auto ckpt = load_checkpoint(s.str("resume"));
    model = ckpt.model;
    train = ckpt.train;
    for (const auto& setting : train_settings()) {
      const auto& k = setting.key;
      if (k != "manifest" && k != "out" && k != "resume" && k != "max_steps" && s.given(k)) {
        throw UsageError(dashed(k) + " cannot change when resuming; only --max-steps may");
      }
    }
    if (s.given("max_steps")) train.max_steps = s.count("max_steps");
    options.resume = std::move(ckpt);
  } else {
    train.learning_rate = s.real("learning_rate");
    train.max_steps = s.count("max_steps");
    train.batch_size = s.count("batch_size");
    train.eval_every = s.count("eval_every");
    train.seed = s.u64("seed");
    train.val_fraction = s.real("val_fraction");
    train.grad_clip = s.real("grad_clip");
    model.resnet.width_scale = s.real("width_scale");
    model.proj_depth = s.count("proj_depth");
    model.transformer.d_model = s.count("d_model");
    model.transformer.n_heads = s.count("n_heads");
    model.transformer.enc_layers = s.count("enc_layers");
    model.transformer.dec_layers = s.count("dec_layers");
    model.transformer.d_ff = s.count("d_ff");
    model.transformer.dropout = s.real("dropout");
    model.transformer.max_target_len = s.count("max_target_len");
    model.binarize = s.boolean("binarize");
  }
  try {
    model.validate();
    train.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }

  options.on_record = [](const LogRecord& r) {
    std::ostringstream line;
    line << "step " << r.step << " loss " << std::fixed << std::setprecision(4) << r.loss;
    if (r.val_cer) line << " val_cer " << std::setprecision(2) << *r.val_cer;
    if (r.val_cer) log_info(line.str());
    else log_debug(line.str());
  };
  const auto result = fit(std::filesystem::path(s.str("manifest")), model, train, options);
  out << "trained to step " << result.checkpoint.step;
  if (!result.log.empty()) out << ", final loss " << std::fixed << std::setprecision(4) << result.log.back().loss;
  out << "\ncheckpoint: " << (options.out_dir / "checkpoint.htr").string() << '\n';
  return kExitOk;
}

// ---- eval / predict

int do_eval(const Settings& s, std::ostream& out, std::ostream&) {
  const auto report = evaluate_model(load_checkpoint(s.str("ckpt")), s.str("manifest"));
  out << (s.boolean("json") ? report.to_json() : report.to_table()) << '\n';
  return kExitOk;
}

int do_predict(const Settings& s, std::ostream& out, std::ostream&) {
  const auto width = s.count("beam");
  if (width < 1) throw UsageError("--beam must be at least 1");
  const auto ckpt = load_checkpoint(s.str("ckpt"));
  auto model = model_from_checkpoint(ckpt);
  for (const auto& path : s.list("image")) {
    auto line = normalize_image(load_image(path), ckpt.model.image_height, ckpt.model.max_width);
    if (ckpt.model.binarize) line = otsu_binarize(line);
    std::string text;
    if (width == 1) {
      text = transcribe(*model, ckpt.vocab, line);
    } else {
      const std::size_t widths[] = {line.width()};
      const auto memory = model->encode(Recognizer<float>::line_input(line), widths, ForwardMode{});
      text = decode(ckpt.vocab,
                    beam_decode(model->scorer(memory, 0), width, ckpt.model.transformer.max_target_len).tokens);
    }
    out << path << '\t' << text << '\n';
  }
  return kExitOk;
}

// ---- gradcheck

int do_gradcheck(const Settings& s, std::ostream& out, std::ostream& err) {
  const auto points = s.count("points");
  if (points < 1) throw UsageError("--points must be at least 1");
  const auto results = run_gradcheck_suite(s.u64("seed"), int(points), s.real("tolerance"));
  std::size_t failed = 0;
  for (const auto& r : results) {
    out << std::left << std::setw(24) << r.name << ' ' << std::scientific << std::setprecision(3) << r.max_error
        << ' ' << (r.passed ? "ok" : "FAIL") << '\n';
    failed += r.passed ? 0 : 1;
  }
  if (failed > 0) {
    err << failed << " of " << results.size() << " gradient checks failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

std::vector<Command> commands() {
  return {
      {"synth",
       "render synthetic line images and a manifest",
       {{"lexicon", "text file, one line of text per row", "", true},
        {"count", "number of lines to render", "", true},
        {"out", "output directory", "", true},
        {"glyphs", "glyph file (default: procedural glyphs for the lexicon's characters)", ""},
        {"save_glyphs", "also write the glyph set used to this file", ""},
        {"seed", "random seed", "0"},
        {"noise", "standard deviation of additive pixel noise", "0.02"}},
       do_synth},
      {"train", "train a recognizer on a manifest", train_settings(), do_train},
      {"eval",
       "greedy-decode a manifest and report CER/WER",
       {{"manifest", "evaluation manifest (TSV)", "", true},
        {"ckpt", "checkpoint file", "", true},
        {"json", "print the report as JSON", "false", false, true}},
       do_eval},
      {"predict",
       "transcribe line images",
       {{"image", "line image (repeatable)", "", true, false, true},
        {"ckpt", "checkpoint file", "", true},
        {"beam", "beam width (1: greedy)", "1"}},
       do_predict},
      {"gradcheck",
       "finite-difference check of every differentiable op",
       {{"seed", "random seed", "2024"}, {"points", "random points per op", "10"}, {"tolerance", "max relative error", "1e-4"}},
       do_gradcheck},
  };
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const auto cmds = commands();
  CLI::App app{"Handwritten line recognition toolkit", argv.empty() ? "htr" : argv[0]};
  app.require_subcommand(1);
  app.fallthrough(false);

  struct Bound {
    const Command* command;
    CLI::App* sub;
    std::string config;
    std::map<std::string, std::vector<std::string>> values;
    std::map<std::string, bool> flags;
    std::map<std::string, CLI::Option*> options;
  };
  std::vector<Bound> bound(cmds.size());
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto& b = bound[i];
    b.command = &cmds[i];
    b.sub = app.add_subcommand(cmds[i].name, cmds[i].help);
    b.sub->add_option("--config", b.config, "key = value file; command-line flags take precedence");
    for (const auto& setting : cmds[i].settings) {
      std::string desc = setting.help;
      if (!setting.fallback.empty() && !setting.is_flag) desc += " [default: " + setting.fallback + "]";
      if (setting.required) desc += " (required)";
      if (setting.is_flag) {
        b.options[setting.key] = b.sub->add_flag(dashed(setting.key), b.flags[setting.key], desc);
      } else {
        auto* opt = b.sub->add_option(dashed(setting.key), b.values[setting.key], desc);
        if (!setting.repeated) opt->expected(1);
        b.options[setting.key] = opt;
      }
    }
  }

  auto usage = [&](const std::string& msg) {
    err << "error: " << msg << "\n\n" << app.help();
    return kExitUsage;
  };

  if (argv.size() > 1 && !argv[1].empty() && argv[1][0] != '-' &&
      std::none_of(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == argv[1]; })) {
    return usage("unknown subcommand '" + argv[1] + "'");
  }

  // CLI11 takes the arguments without the program name, in reverse order.
  std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << sub->help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return usage(e.what());
  }

  for (auto& b : bound) {
    if (!b.sub->parsed()) continue;
    try {
      Settings settings;
      std::map<std::string, std::string> file;
      if (!b.config.empty()) file = read_config(b.config);
      for (const auto& [key, _] : file) {
        const auto& all = b.command->settings;
        if (std::none_of(all.begin(), all.end(), [&](const Setting& s) { return s.key == key; })) {
          throw UsageError("unknown key '" + key + "' in " + b.config);
        }
      }
      for (const auto& setting : b.command->settings) {
        const auto& k = setting.key;
        if (b.options[k]->count() > 0) {
          settings.set(k, setting.is_flag ? std::vector<std::string>{"true"} : b.values[k], Source::flag);
        } else if (file.count(k)) {
          settings.set(k, {file[k]}, Source::file);
        } else if (!setting.fallback.empty()) {
          settings.set(k, {setting.fallback}, Source::fallback);
        } else if (setting.required) {
          throw UsageError("missing required option " + dashed(k));
        }
      }
      return b.command->action(settings, out, err);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n\n" << b.sub->help();
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  return usage("no subcommand given");
}

}  // namespace htr::cli
