// rankmask-lab: runs one analysis and writes its report.
//
//   rankmask-lab <analysis> --config <file> --seeds a,b,c --out <dir>
//
// On failure a JSON error record goes to stderr and, when possible, to
// <out>/error.json; the exit code names the error kind.

#include <CLI11.hpp>
#include <malloc.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "rankmask/error.hpp"
#include "rankmask/harness.hpp"
#include "rankmask/report.hpp"
#include "rankmask/taskgen.hpp"

namespace fs = std::filesystem;
using namespace rankmask;

namespace {

struct Options {
  std::string analysis;
  std::string config_path;
  std::string seeds;
  std::string out;
  std::vector<std::string> overrides;
  std::size_t threads = 0;
  bool no_logs = false;
};

int exit_code(std::string_view kind) {
  if (kind == "config") return 2;
  if (kind == "io") return 3;
  if (kind == "audit") return 4;
  if (kind == "usage") return 64;
  return 1;
}

int report_error(const Options& opt, std::string_view kind, const std::string& message, const std::string& field) {
  nlohmann::ordered_json rec;
  rec["error"]["kind"] = kind;
  rec["error"]["message"] = message;
  if (!field.empty()) rec["error"]["field"] = field;
  rec["error"]["analysis"] = opt.analysis;
  const std::string text = rec.dump();
  std::cerr << text << '\n';
  if (!opt.out.empty()) {
    std::error_code ec;
    fs::create_directories(opt.out, ec);
    std::ofstream f(fs::path(opt.out) / "error.json");
    if (f) f << text << '\n';
  }
  return exit_code(kind);
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << content;
}

ExperimentConfig build_config(const Options& opt) {
  ExperimentConfig config = load_config(opt.config_path);
  for (const std::string& kv : opt.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set", "expected key=value, got '" + kv + "'");
    set_config_entry(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!opt.seeds.empty()) set_config_entry(config, "seeds", opt.seeds);
  if (opt.threads > 0) config.threads = opt.threads;
  config.validate();
  return config;
}

void print_claims(const Report& report) {
  for (const ReportTable& t : report.tables) {
    if (t.name != "claims") continue;
    for (const ReportRow& r : t.rows) {
      std::cout << "  " << r.label << ": " << r.values[0] << "/" << r.values[1] << " (sign test p="
                << format_number(r.values[2]) << ")\n";
    }
  }
}

int run(const Options& opt) {
  const ExperimentConfig config = build_config(opt);
  const fs::path out(opt.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  write_text(out / "config.echo", render_config(config));

  Lab lab(config);

  if (opt.analysis == "export-dataset") {
    fs::create_directories(out / "datasets");
    for (std::uint64_t seed : config.seeds) {
      save_dataset(lab.dataset(seed), out / "datasets" / ("seed-" + std::to_string(seed) + ".tsv"));
      save_dataset(lab.shifted(seed), out / "datasets" / ("seed-" + std::to_string(seed) + "-shifted.tsv"));
    }
    std::cout << "wrote " << config.seeds.size() << " dataset pairs to " << (out / "datasets").string() << '\n';
    return 0;
  }

  if (!opt.no_logs) lab.set_log_dir(out / "runs");
  const std::vector<RunSpec> specs = analysis_runs(lab, opt.analysis);
  Report report = run_analysis(lab, opt.analysis);

  if (opt.analysis == "train") {
    fs::create_directories(out / "checkpoints");
    for (const RunSpec& spec : specs) {
      const TrainedRun& run = lab.run(spec);
      Checkpoint ckpt{run.result.params, {}, {}};
      if (spec.mode == MaskMode::pm) {
        ckpt.mask_logits = run.result.w.logits;
        ckpt.candidates = lab.space().positions();
      }
      save_checkpoint(ckpt, out / "checkpoints" / (run.id + ".ckpt"));
      report.artifacts.push_back("checkpoints/" + run.id + ".ckpt");
    }
  }
  if (!opt.no_logs) {
    for (const RunSpec& spec : specs) report.artifacts.push_back("runs/" + spec.id() + ".log");
  }
  write_text(out / "timing.csv", render_timing(lab, specs));
  emit_report(report, out);

  std::cout << opt.analysis << ": " << specs.size() << " runs, report in " << out.string() << '\n';
  print_claims(report);
  if (!report.audit_passed) throw AuditError("test-split access audit failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates many ~0.5 MB buffers; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  CLI::App app{"Passage-mask experiment driver"};
  app.require_subcommand(1, 1);
  Options opt;

  std::vector<std::string> names = analysis_names();
  names.push_back("export-dataset");
  for (const std::string& name : names) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " analysis");
    if (name == "export-dataset") sub->description("write the generated datasets of each seed");
    sub->add_option("--config", opt.config_path, "key-value config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seeds", opt.seeds, "comma-separated replicate seeds (overrides the config)");
    sub->add_option("--out", opt.out, "output directory")->required();
    sub->add_option("--set", opt.overrides, "override a config entry, key=value (repeatable)");
    sub->add_option("--threads", opt.threads, "replicate runs trained in parallel");
    sub->add_flag("--no-logs", opt.no_logs, "skip per-run logs under runs/");
    sub->callback([&opt, name] { opt.analysis = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(opt, "usage", e.what(), "");
  }

  try {
    return run(opt);
  } catch (const ConfigError& e) {
    return report_error(opt, e.kind(), e.what(), e.field());
  } catch (const Error& e) {
    return report_error(opt, e.kind(), e.what(), "");
  } catch (const std::exception& e) {
    return report_error(opt, "internal", e.what(), "");
  }
}
