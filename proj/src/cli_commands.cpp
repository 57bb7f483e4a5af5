#include "depthkit/cli_commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "depthkit/gradcheck.hpp"
#include "depthkit/runconfig.hpp"

namespace depthkit {

namespace {

namespace fs = std::filesystem;

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

RunConfig load_with_overrides(const std::string& config_path,
                              const CliOverrides& ov) {
  RunConfig rc = load_run_config(config_path);
  if (ov.variant) rc.model.variant = make_variant(*ov.variant);
  if (ov.out_dir) rc.out_dir = *ov.out_dir;
  if (ov.seed) {
    rc.seed = *ov.seed;
    rc.train.seed = *ov.seed;
  }
  if (ov.steps) {
    rc.train.steps = *ov.steps;
    if (rc.train.warmup_steps > rc.train.steps) {
      rc.train.warmup_steps = rc.train.steps;
    }
  }
  return rc;
}

Corpus open_corpus(const RunConfig& rc) {
  if (rc.corpus_path.empty()) {
    throw ConfigError("data.corpus is required");
  }
  return load_corpus(rc.corpus_path, rc.doc_separator);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

std::string with_commas(int64_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  int since = 0;
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (since == 3) {
      out += ',';
      since = 0;
    }
    out += *it;
    ++since;
  }
  return std::string(out.rbegin(), out.rend());
}

std::string approx_millions(int64_t n) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << double(n) / 1e6 << "M";
  return "≈" + ss.str();
}

std::string budget_str(const UpdateVariant& v) {
  auto [a, m] = oracle_call_count(v);
  std::ostringstream ss;
  ss << a << " Attn + " << m << " MLP";
  return ss.str();
}

std::string f17(double x) {
  std::ostringstream ss;
  ss << std::setprecision(17) << x;
  return ss.str();
}

}  // namespace

int cmd_train(const std::string& config_path, const CliOverrides& ov,
              std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig rc = load_with_overrides(config_path, ov);
    validate(rc.model);
    validate(rc.train);
    Corpus corpus = open_corpus(rc);

    fs::create_directories(rc.out_dir);
    std::string resolved = canonical_config(rc);
    write_text(fs::path(rc.out_dir) / "config.json", resolved);

    Model<double> model = init_model<double>(rc.model, rc.seed);
    out << "training " << variant_name(rc.model.variant) << " for "
        << rc.train.steps << " steps, "
        << count_params(rc.model).total << " parameters\n";
    TrainResult res = train(model, corpus, rc.train, rc.out_dir, resolved, &out);

    out << "initial train loss " << res.initial_train_loss << "\n";
    out << "final train loss   " << res.final_train_loss << "\n";
    out << "best val loss      " << res.best_val << " at step "
        << res.best_val_step << "\n";
    out << "final val loss     " << res.final_val << "\n";
    out << "metrics: " << res.metrics_path << "\n";
    out << "checkpoints: " << res.best_ckpt_path << ", "
        << res.final_ckpt_path << "\n";
    return kExitOk;
  });
}

int cmd_compare(const std::string& config_path,
                const std::vector<std::string>& variants,
                const CliOverrides& ov, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig base = load_with_overrides(config_path, ov);
    std::vector<std::string> names =
        variants.empty() ? all_variant_names() : variants;

    struct Row {
      std::string name;
      std::string budget;
      double best, final_val, train_last;
    };
    std::vector<Row> rows;

    for (const std::string& name : names) {
      RunConfig rc = base;
      rc.model.variant = make_variant(name);
      rc.out_dir = (fs::path(base.out_dir) / name).string();
      validate(rc.model);
      validate(rc.train);
      Corpus corpus = open_corpus(rc);

      fs::create_directories(rc.out_dir);
      std::string resolved = canonical_config(rc);
      write_text(fs::path(rc.out_dir) / "config.json", resolved);

      out << "=== " << name << " ===\n";
      Model<double> model = init_model<double>(rc.model, rc.seed);
      TrainResult res =
          train(model, corpus, rc.train, rc.out_dir, resolved, &out);
      rows.push_back({name, budget_str(rc.model.variant), res.best_val,
                      res.final_val, res.final_train_loss});
    }

    out << "\n";
    out << std::left << std::setw(16) << "Method" << std::setw(24) << "Budget"
        << std::right << std::setw(12) << "Best val" << std::setw(12)
        << "Final val" << std::setw(12) << "Train@last" << "\n";
    for (const Row& r : rows) {
      std::ostringstream line;
      line << std::left << std::setw(16) << r.name << std::setw(24) << r.budget
           << std::right << std::fixed << std::setprecision(4) << std::setw(12)
           << r.best << std::setw(12) << r.final_val << std::setw(12)
           << r.train_last;
      out << line.str() << "\n";
    }

    fs::create_directories(base.out_dir);
    std::ostringstream csv;
    csv << "method,attn_calls,mlp_calls,best_val,final_val,train_at_last\n";
    for (const Row& r : rows) {
      auto [a, m] = oracle_call_count(make_variant(r.name));
      csv << r.name << ',' << a << ',' << m << ',' << f17(r.best) << ','
          << f17(r.final_val) << ',' << f17(r.train_last) << '\n';
    }
    fs::path csv_path = fs::path(base.out_dir) / "compare.csv";
    write_text(csv_path, csv.str());
    out << "report: " << csv_path.string() << "\n";
    return kExitOk;
  });
}

int cmd_paramcount(int64_t n_layers, int64_t n_heads, int64_t dim,
                   int64_t vocab, const std::string& variant, int64_t context,
                   std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    ModelConfig mc;
    mc.n_layers = n_layers;
    mc.n_heads = n_heads;
    mc.dim = dim;
    mc.vocab = vocab;
    mc.context = context;
    mc.variant = make_variant(variant);
    validate(mc);
    ParamCounts c = count_params(mc);

    out << "layers " << n_layers << "  heads " << n_heads << "  dim " << dim
        << "  vocab " << vocab << "  context " << context << "  variant "
        << variant << "\n";
    auto line = [&](const char* label, int64_t value, bool approx) {
      out << std::left << std::setw(22) << label << std::right << std::setw(15)
          << with_commas(value);
      if (approx) out << "  (" << approx_millions(value) << ")";
      out << "\n";
    };
    line("non_positional", c.non_positional, true);
    line("positional", c.positional, false);
    line("velocity_token", c.velocity_token, c.velocity_token > 0);
    line("velocity_positional", c.velocity_positional, false);
    line("scalars", c.scalars, false);
    line("lnv", c.lnv, false);
    line("total", c.total, true);

    nlohmann::json j = {{"non_positional", c.non_positional},
                        {"positional", c.positional},
                        {"velocity_token", c.velocity_token},
                        {"velocity_positional", c.velocity_positional},
                        {"scalars", c.scalars},
                        {"lnv", c.lnv},
                        {"total", c.total}};
    out << j.dump() << "\n";
    return kExitOk;
  });
}

int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out,
                  std::ostream& err) {
  return guarded(err, [&] {
    std::vector<std::string> names;
    if (opt.variant == "all") {
      if (opt.ordering || opt.k || opt.lnv_mode) {
        throw ConfigError(
            "--ordering/--k/--lnv-mode need a single --variant, not all");
      }
      names = all_variant_names();
    } else {
      names = {opt.variant};
    }

    bool all_pass = true;
    for (const std::string& name : names) {
      UpdateVariant variant =
          make_variant(name, opt.ordering, opt.k, opt.lnv_mode);
      ModelConfig mc;
      mc.n_layers = 2;
      mc.n_heads = 2;
      mc.dim = 16;
      mc.vocab = 64;
      mc.context = 16;
      mc.variant = variant;
      Model<double> model = init_model<double>(mc, opt.seed);

      Rng data_rng(mix64(opt.seed, 0xB17C));
      std::vector<std::vector<int64_t>> windows;
      for (int w = 0; w < 2; ++w) {
        std::vector<int64_t> win;
        for (int64_t i = 0; i < mc.context + 1; ++i) {
          win.push_back(data_rng.below(mc.vocab));
        }
        windows.push_back(win);
      }

      std::vector<Tensor<double>> analytic;
      {
        Tape<double> tape(false);
        Forward<double> f(tape, model);
        tape.backward(f.batch_loss(windows));
        for (const auto& [pname, var] : f.bound()) {
          analytic.push_back(tape.grad(var));
        }
      }
      bool corrupted = false;
      if (!opt.corrupt_grad.empty()) {
        for (size_t i = 0; i < model.params.size(); ++i) {
          if (model.params[i].first == opt.corrupt_grad) {
            analytic[i].arr() = -analytic[i].arr();
            corrupted = true;
          }
        }
        if (!corrupted) {
          throw ConfigError("no parameter named " + opt.corrupt_grad);
        }
      }

      double worst = 0;
      std::string worst_param = "-";
      int64_t worst_idx = -1;
      int64_t unreliable = 0;
      for (size_t p = 0; p < model.params.size(); ++p) {
        const std::string& pname = model.params[p].first;
        Tensor<double> theta = model.params[p].second;
        auto f = [&](const Tensor<double>& probe) {
          Model<double> poked = model;
          poked.params[p].second = probe;
          Tape<double> tape(false);
          Forward<double> fwd(tape, poked);
          return double(fwd.batch_loss(windows).value()[0]);
        };
        int64_t n = theta.numel();
        int64_t probes = std::min<int64_t>(n, 10);
        std::vector<int64_t> indices;
        for (int64_t i = 0; i < probes; ++i) indices.push_back(i * n / probes);
        GradCheckReport rep =
            grad_check<double>(f, theta, analytic[p], 1e-5, indices);
        unreliable += rep.unreliable_count;
        if (rep.max_rel_err > worst) {
          worst = rep.max_rel_err;
          worst_param = pname;
          worst_idx = rep.worst_index;
        }
      }

      bool pass = worst <= 1e-4;
      all_pass = all_pass && pass;
      out << name << ": " << (pass ? "PASS" : "FAIL") << " max rel err "
          << std::scientific << std::setprecision(3) << worst
          << std::defaultfloat;
      if (!pass) out << " at " << worst_param << "[" << worst_idx << "]";
      if (unreliable > 0) out << " (" << unreliable << " probes near kinks)";
      out << "\n";
      nlohmann::json j = {{"variant", name},
                          {"max_rel_err", worst},
                          {"worst_param", worst_param},
                          {"pass", pass}};
      out << j.dump() << "\n";
    }
    return all_pass ? kExitOk : kExitNumerical;
  });
}

int cmd_datapipe_dump(const DatapipeDumpOptions& opt, std::ostream& out,
                      std::ostream& err) {
  return guarded(err, [&] {
    Corpus corpus = load_corpus(opt.corpus_path, opt.separator);
    std::vector<int> split = split_documents(corpus.documents.size(),
                                             opt.val_fraction, opt.seed);
    std::vector<std::string> train_docs;
    for (size_t i = 0; i < corpus.documents.size(); ++i) {
      if (split[i] == 0) train_docs.push_back(corpus.documents[i]);
    }
    std::vector<int64_t> stream = tokenize(train_docs);
    WindowStream ws(std::move(stream), opt.context, mix64(opt.seed, 1));
    for (int64_t b = 0; b < opt.batches; ++b) {
      auto batch = ws.next_batch(opt.batch_sequences);
      for (const auto& window : batch) {
        for (size_t i = 0; i < window.size(); ++i) {
          if (i) out << ' ';
          out << window[i];
        }
        out << '\n';
      }
    }
    return kExitOk;
  });
}

}  // namespace depthkit
