#include "rankuda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace rankuda {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

constexpr std::uint64_t kStageRank = 1;
constexpr std::uint64_t kStageAggregate = 2;
constexpr std::uint64_t kStageRegression = 3;

std::uint64_t stage_stream(std::uint64_t stage, int iteration) {
  return (static_cast<std::uint64_t>(iteration) << 8) | stage;
}

// Exclusive lock file; removed when the run finishes.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : file_(dir / ".lock") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (std::filesystem::exists(file_)) {
      fail("output directory " + dir.string() +
           " is locked by another run (remove .lock if stale)");
    }
    std::ofstream out(file_, std::ios::trunc);
    if (!out) fail("cannot create lock file " + file_.string());
    out << "locked\n";
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(file_, ec);
  }

 private:
  std::filesystem::path file_;
};

}  // namespace

void adam_step(Parameter& p, std::span<const double> grad, const AdamParams& ap) {
  if (grad.size() != p.value.size()) {
    fail("adam: gradient size mismatch for parameter '" + p.name + "'");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) fail("adam: non-finite gradient for parameter '" + p.name + "'");
  }
  p.step += 1;
  const double bc1 = 1.0 - std::pow(ap.beta1, static_cast<double>(p.step));
  const double bc2 = 1.0 - std::pow(ap.beta2, static_cast<double>(p.step));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = grad[i] + ap.weight_decay * p.value[i];
    p.m[i] = ap.beta1 * p.m[i] + (1.0 - ap.beta1) * g;
    p.v[i] = ap.beta2 * p.v[i] + (1.0 - ap.beta2) * g * g;
    const double mhat = p.m[i] / bc1;
    const double vhat = p.v[i] / bc2;
    p.value[i] -= ap.lr * mhat / (std::sqrt(vhat) + ap.eps);
  }
  if (p.nonneg) {
    for (double& v : p.value) v = std::max(v, 0.0);
  }
}

void save_loss_log(const TrainLog& log, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) fail("cannot write " + file.string());
  out << "step,L_pre,L_mmd,L_ct,L_rec,L_cor,L_mse,total\n";
  for (const auto& row : log.steps) {
    out << row.step << "," << format_double(row.loss.pre) << ","
        << format_double(row.loss.mmd) << "," << format_double(row.loss.ct) << ","
        << format_double(row.loss.rec) << "," << format_double(row.loss.cor) << ","
        << format_double(row.loss.mse) << "," << format_double(row.loss.total) << "\n";
  }
}

void save_accuracy_log(const TrainLog& log, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) fail("cannot write " + file.string());
  out << "iteration,epoch,source_accuracy\n";
  for (const auto& row : log.epochs) {
    out << row.iteration << "," << row.epoch << "," << format_double(row.source_accuracy)
        << "\n";
  }
}

ImageStore ImageStore::load(const Manifest& manifest, int input_size) {
  ImageStore store;
  for (const auto& e : manifest.entries) {
    Image im = load_manifest_image(manifest, e.id);
    Image net = im.channels == 3 ? im : expand_channels(to_gray(im), 3);
    net = resize_bilinear(net, input_size, input_size);
    store.ids_.push_back(e.id);
    store.original_.emplace(e.id, std::move(im));
    store.network_.emplace(e.id, std::move(net));
  }
  return store;
}

const Image& ImageStore::original(const std::string& id) const {
  const auto it = original_.find(id);
  if (it == original_.end()) fail("image store: unknown id '" + id + "'");
  return it->second;
}

const Image& ImageStore::network(const std::string& id) const {
  const auto it = network_.find(id);
  if (it == network_.end()) fail("image store: unknown id '" + id + "'");
  return it->second;
}

void ImageStore::merge(ImageStore other) {
  for (auto& id : other.ids_) {
    if (original_.count(id)) fail("image store: duplicate id '" + id + "' across manifests");
    ids_.push_back(id);
  }
  original_.merge(other.original_);
  network_.merge(other.network_);
}

int eval_thread_count() {
  if (const char* env = std::getenv("RANKUDA_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return std::min(v, 64);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(hc == 0 ? 1u : hc, 8u));
}

std::vector<std::vector<double>> eval_features(const ImageStore& images,
                                               std::span<const std::string> ids,
                                               ModelState& state, int threads) {
  std::vector<std::vector<double>> out(ids.size());
  const auto worker = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      out[i] = encode_eval(images.network(ids[i]), state);
    }
  };
  threads = std::max(1, std::min<int>(threads, static_cast<int>(ids.size())));
  if (threads == 1) {
    worker(0, ids.size());
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (ids.size() + threads - 1) / static_cast<std::size_t>(threads);
  for (int t = 0; t < threads; ++t) {
    const std::size_t b = static_cast<std::size_t>(t) * chunk;
    const std::size_t e = std::min(ids.size(), b + chunk);
    if (b >= e) break;
    pool.emplace_back(worker, b, e);
  }
  for (auto& th : pool) th.join();
  return out;
}

double rank_probability(const ModelState& state, std::span<const double> feature_a,
                        std::span<const double> feature_b) {
  const Parameter& w = state.param("cls_w");
  const Parameter& b = state.param("cls_b");
  const std::size_t d = feature_a.size();
  double z0 = b.value[0], z1 = b.value[1];
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = feature_a[i] - feature_b[i];
    z0 += diff * w.value[i * 2];
    z1 += diff * w.value[i * 2 + 1];
  }
  const double mx = std::max(z0, z1);
  const double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
  return e1 / (e0 + e1);
}

namespace {

double source_accuracy(const ImageStore& images, std::span<const PairSample> pairs,
                       ModelState& state) {
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> index;
  for (const auto& p : pairs) {
    for (const std::string* id : {&p.first, &p.second}) {
      if (index.emplace(*id, ids.size()).second) ids.push_back(*id);
    }
  }
  const auto features = eval_features(images, ids, state, eval_thread_count());
  long correct = 0;
  for (const auto& p : pairs) {
    const double prob =
        rank_probability(state, features[index.at(p.first)], features[index.at(p.second)]);
    const int predicted = prob > 0.5 ? 1 : 0;
    if (p.label && predicted == *p.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

}  // namespace

RankTrainResult train_ranking(const ImageStore& images,
                              std::span<const PairSample> source_pairs,
                              std::span<const PairSample> target_pairs,
                              const std::map<std::string, double>& source_scores,
                              const PipelineConfig& cfg, Rng& rng, TrainLog* log,
                              long* step_counter, int log_iteration) {
  if (source_pairs.empty()) fail("train_ranking: no source pairs");
  for (const auto& p : source_pairs) {
    if (!p.label) fail("train_ranking: unlabelled source pair " + p.first + "/" + p.second);
  }
  const bool needs_target =
      cfg.weights.mmd > 0.0 || cfg.weights.rectification > 0.0;
  if (needs_target && target_pairs.empty()) {
    fail("train_ranking: target pairs required while mmd or rectification weights are nonzero");
  }
  // Each batch holds batch_size/2 rank samples per domain, built from
  // batch_size/4 drawn pairs plus their mirrors. The mirrored rank feature
  // is the negation of the original, so only the drawn pairs are encoded,
  // and the balanced orientations keep the classifier bias anchored.
  const int per = cfg.train.batch_size / 2;
  const int half = per / 2;
  if (static_cast<int>(source_pairs.size()) < half) {
    fail("train_ranking: need at least " + std::to_string(half) + " source pairs");
  }

  ModelState state = init_model(cfg.encoder, rng);
  const std::vector<std::string> trainable = state.ranking_param_names();
  const AdamParams ap{cfg.train.learning_rate, cfg.train.weight_decay,
                      cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps};

  std::vector<std::size_t> src_order(source_pairs.size());
  for (std::size_t i = 0; i < src_order.size(); ++i) src_order[i] = i;
  std::vector<std::size_t> tgt_order(target_pairs.size());
  for (std::size_t i = 0; i < tgt_order.size(); ++i) tgt_order[i] = i;

  RankTrainResult best;
  best.state = state;
  best.best_accuracy = -1.0;
  int stale_epochs = 0;
  long local_step = 0;

  const int steps_per_epoch = static_cast<int>(source_pairs.size()) / half;
  for (int epoch = 1; epoch <= cfg.train.rank_max_epochs; ++epoch) {
    rng.shuffle(src_order);
    rng.shuffle(tgt_order);
    std::size_t tgt_cursor = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      std::vector<const PairSample*> sp(static_cast<std::size_t>(half));
      for (int i = 0; i < half; ++i) {
        sp[static_cast<std::size_t>(i)] =
            &source_pairs[src_order[static_cast<std::size_t>(step * half + i)]];
      }
      std::vector<const PairSample*> tp;
      if (needs_target) {
        tp.resize(static_cast<std::size_t>(half));
        for (int i = 0; i < half; ++i) {
          tp[static_cast<std::size_t>(i)] = &target_pairs[tgt_order[tgt_cursor]];
          tgt_cursor = (tgt_cursor + 1) % tgt_order.size();
        }
      }

      std::vector<const Image*> batch_images;
      batch_images.reserve(static_cast<std::size_t>(2 * half + (needs_target ? 2 * half : 0)));
      for (const auto* p : sp) batch_images.push_back(&images.network(p->first));
      for (const auto* p : sp) batch_images.push_back(&images.network(p->second));
      if (needs_target) {
        for (const auto* p : tp) batch_images.push_back(&images.network(p->first));
        for (const auto* p : tp) batch_images.push_back(&images.network(p->second));
      }

      ad::Tape tape;
      BoundModel model = bind_model(tape, state, Mode::kTrain, trainable);
      ad::Tensor feats = encode_batch(model, batch_images);

      RankingBatch batch;
      ad::Tensor src_rank = rank_feature(ad::slice(feats, 0, 0, half),
                                         ad::slice(feats, 0, half, 2 * half));
      {
        std::vector<ad::Tensor> both{src_rank, ad::neg(src_rank)};
        batch.source_features = ad::concat(both, 0);
      }
      batch.source_labels.resize(static_cast<std::size_t>(per));
      for (int i = 0; i < half; ++i) {
        const int y = *sp[static_cast<std::size_t>(i)]->label;
        batch.source_labels[static_cast<std::size_t>(i)] = y;
        batch.source_labels[static_cast<std::size_t>(half + i)] = 1 - y;
      }
      if (needs_target) {
        ad::Tensor tgt_rank = rank_feature(ad::slice(feats, 0, 2 * half, 3 * half),
                                           ad::slice(feats, 0, 3 * half, 4 * half));
        std::vector<ad::Tensor> both{tgt_rank, ad::neg(tgt_rank)};
        batch.target_features = ad::concat(both, 0);
      }
      if (cfg.weights.mse > 0.0) {
        batch.source_single_features = ad::slice(feats, 0, 0, 2 * half);
        batch.source_single_targets.resize(static_cast<std::size_t>(2 * half));
        for (int i = 0; i < half; ++i) {
          const auto a = source_scores.find(sp[static_cast<std::size_t>(i)]->first);
          const auto b = source_scores.find(sp[static_cast<std::size_t>(i)]->second);
          if (a == source_scores.end() || b == source_scores.end()) {
            fail("train_ranking: missing source score for a batch image");
          }
          batch.source_single_targets[static_cast<std::size_t>(i)] = a->second;
          batch.source_single_targets[static_cast<std::size_t>(half + i)] = b->second;
        }
      }

      LossBreakdown bd;
      ad::Tensor loss =
          total_loss(batch, model, cfg.weights, &bd, std::nullopt, cfg.corr_squared);
      tape.backward(loss);
      for (const auto& name : trainable) {
        const auto g = model[name].grad();
        if (g.empty()) continue;  // not reachable from this loss configuration
        adam_step(state.param(name), g, ap);
      }
      ++local_step;
      if (log) {
        const long global = step_counter ? ++(*step_counter) : local_step;
        log->steps.push_back({global, bd});
      }
    }

    const double acc = source_accuracy(images, source_pairs, state);
    if (log) log->epochs.push_back({log_iteration, epoch, acc});
    if (acc > best.best_accuracy) {
      best.best_accuracy = acc;
      best.best_epoch = epoch;
      best.state = state;
      stale_epochs = 0;
    } else {
      ++stale_epochs;
      if (stale_epochs >= cfg.train.patience) break;
    }
  }
  return best;
}

std::vector<double> tournament_scores(int n, const std::function<double(int, int)>& prob) {
  if (n < 2) fail("tournament: need at least 2 images");
  std::vector<double> scores(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    long wins = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      if (prob(i, j) > 0.5) ++wins;
    }
    scores[static_cast<std::size_t>(i)] =
        static_cast<double>(wins) / static_cast<double>(n - 1);
  }
  return scores;
}

std::vector<double> aggregate_quality(const ImageStore& images,
                                      std::span<const std::string> ids,
                                      ModelState& state, std::optional<long> sample,
                                      std::uint64_t seed) {
  const int n = static_cast<int>(ids.size());
  if (n < 2) fail("aggregate_quality: need at least 2 target images");
  const auto features = eval_features(images, ids, state, eval_thread_count());
  if (!sample || *sample >= n - 1) {
    return tournament_scores(
        n, [&](int i, int j) { return rank_probability(state, features[static_cast<std::size_t>(i)], features[static_cast<std::size_t>(j)]); });
  }
  // Sampled comparison set for large target sets.
  const long m = *sample;
  Rng rng = stream_rng(seed, stage_stream(kStageAggregate, 0));
  std::vector<double> scores(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<int> others;
    others.reserve(static_cast<std::size_t>(n - 1));
    for (int j = 0; j < n; ++j) {
      if (j != i) others.push_back(j);
    }
    for (long k = 0; k < m; ++k) {
      const std::size_t pick =
          static_cast<std::size_t>(k) +
          static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(others.size() - static_cast<std::size_t>(k))));
      std::swap(others[static_cast<std::size_t>(k)], others[pick]);
    }
    long wins = 0;
    for (long k = 0; k < m; ++k) {
      const int j = others[static_cast<std::size_t>(k)];
      if (rank_probability(state, features[static_cast<std::size_t>(i)],
                           features[static_cast<std::size_t>(j)]) > 0.5) {
        ++wins;
      }
    }
    scores[static_cast<std::size_t>(i)] = static_cast<double>(wins) / static_cast<double>(m);
  }
  return scores;
}

RegressionTrainResult train_regression(const ImageStore& images,
                                       std::span<const std::string> ids,
                                       std::span<const double> pseudo_scores,
                                       ModelState& state, const PipelineConfig& cfg,
                                       Rng& rng, TrainLog* log, long* step_counter) {
  if (ids.size() != pseudo_scores.size()) {
    fail("train_regression: ids and pseudo scores differ in length");
  }
  if (ids.size() < 2) fail("train_regression: need at least 2 images");
  {
    const double first = pseudo_scores[0];
    bool all_same = true;
    for (double s : pseudo_scores) {
      if (s != first) {
        all_same = false;
        break;
      }
    }
    if (all_same) fail("train_regression: all pseudo-scores identical (degenerate target)");
  }

  // Encoder frozen: features computed once in evaluation mode.
  const auto features = eval_features(images, ids, state, eval_thread_count());
  const int d = static_cast<int>(features[0].size());
  const int m = static_cast<int>(ids.size());
  const std::vector<std::string> trainable = state.regression_param_names();
  const AdamParams ap{cfg.train.learning_rate, cfg.train.weight_decay,
                      cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps};

  const int bs = std::min(cfg.train.batch_size, m);
  std::vector<std::size_t> order(static_cast<std::size_t>(m));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto head_params = [&]() {
    std::vector<std::pair<std::string, std::vector<double>>> copy;
    for (const auto& name : trainable) copy.emplace_back(name, state.param(name).value);
    return copy;
  };
  auto full_loss = [&]() {
    ad::Tape tape;
    BoundModel model = bind_model(tape, state, Mode::kEval);
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(m) * d);
    for (const auto& f : features) flat.insert(flat.end(), f.begin(), f.end());
    ad::Tensor fm = tape.leaf({m, d}, std::move(flat));
    ad::Tensor preds = regress_target(model, fm);
    return mse_target(preds, pseudo_scores).item();
  };

  RegressionTrainResult best;
  best.best_loss = full_loss();
  best.best_epoch = 0;
  auto best_params = head_params();

  long local_step = 0;
  for (int epoch = 1; epoch <= cfg.train.regression_max_epochs; ++epoch) {
    rng.shuffle(order);
    const int steps = std::max(1, m / bs);
    for (int step = 0; step < steps; ++step) {
      std::vector<double> flat;
      std::vector<double> targets;
      flat.reserve(static_cast<std::size_t>(bs) * d);
      targets.reserve(static_cast<std::size_t>(bs));
      for (int i = 0; i < bs; ++i) {
        const std::size_t idx = order[static_cast<std::size_t>((step * bs + i) % m)];
        flat.insert(flat.end(), features[idx].begin(), features[idx].end());
        targets.push_back(pseudo_scores[idx]);
      }
      ad::Tape tape;
      BoundModel model = bind_model(tape, state, Mode::kEval, trainable);
      ad::Tensor fm = tape.leaf({bs, d}, std::move(flat));
      ad::Tensor preds = regress_target(model, fm);
      ad::Tensor loss = mse_target(preds, targets);
      tape.backward(loss);
      for (const auto& name : trainable) {
        const auto g = model[name].grad();
        if (g.empty()) continue;
        adam_step(state.param(name), g, ap);
      }
      ++local_step;
      if (log) {
        const long global = step_counter ? ++(*step_counter) : local_step;
        LossBreakdown bd;
        bd.mse = loss.item();
        bd.total = bd.mse;
        log->steps.push_back({global, bd});
      }
    }
    const double epoch_loss = full_loss();
    if (epoch_loss < best.best_loss) {
      best.best_loss = epoch_loss;
      best.best_epoch = epoch;
      best_params = head_params();
    }
  }
  for (auto& [name, value] : best_params) state.param(name).value = std::move(value);
  return best;
}

void save_predictions_csv(std::span<const std::string> ids,
                          std::span<const double> scores,
                          const std::filesystem::path& file) {
  if (ids.size() != scores.size()) fail("predictions: ids and scores differ in length");
  Manifest m;
  m.entries.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    m.entries.push_back({ids[i], scores[i]});
  }
  save_manifest(m, file);
}

namespace {

std::vector<double> predict_targets(const ImageStore& images,
                                    std::span<const std::string> ids, ModelState& state) {
  const auto features = eval_features(images, ids, state, eval_thread_count());
  std::vector<double> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out[i] = regress_target_eval(features[i], state);
  }
  return out;
}

}  // namespace

PipelineResult run_pipeline(const Manifest& source_manifest,
                            const Manifest& target_manifest,
                            const Manifest& pseudo_manifest, const PipelineConfig& cfg,
                            const std::filesystem::path& out_dir) {
  cfg.validate();
  if (!source_manifest.has_all_scores()) {
    fail("pipeline: source manifest must provide a score for every image");
  }
  if (target_manifest.entries.size() < 2) fail("pipeline: need at least 2 target images");
  RunLock lock(out_dir);

  PipelineResult result;
  result.target_ids = target_manifest.ids();

  // Source scores are min-max normalized before pair selection and MSE.
  Manifest source_norm = source_manifest;
  {
    std::vector<double> raw;
    raw.reserve(source_norm.entries.size());
    for (const auto& e : source_norm.entries) raw.push_back(*e.score);
    const auto norm = minmax_normalize(raw);
    for (std::size_t i = 0; i < norm.size(); ++i) source_norm.entries[i].score = norm[i];
  }
  const auto source_scores = source_norm.score_map();

  ImageStore images = ImageStore::load(source_norm, cfg.encoder.input_size);
  images.merge(ImageStore::load(target_manifest, cfg.encoder.input_size));

  const auto source_pairs = select_source_pairs(source_norm, cfg.pairs);
  if (source_pairs.empty()) {
    fail("pipeline: source pair selection produced no pairs (tau too high?)");
  }

  // Initial pseudo-MOS from the external manifest, normalized over the
  // target ids.
  std::vector<double> pseudo(result.target_ids.size());
  {
    const auto pm = pseudo_manifest.score_map();
    std::vector<double> raw;
    raw.reserve(result.target_ids.size());
    for (const auto& id : result.target_ids) {
      const auto it = pm.find(id);
      if (it == pm.end()) fail("pipeline: missing pseudo score for id '" + id + "'");
      raw.push_back(it->second);
    }
    pseudo = minmax_normalize(raw);
  }

  const auto target_lookup = [&](const std::string& id) -> const Image& {
    return images.original(id);
  };

  long step_counter = 0;
  ModelState state;
  for (int iter = 1; iter <= cfg.train.pipeline_iterations; ++iter) {
    const auto iter_dir = out_dir / ("iter" + std::to_string(iter));
    std::error_code ec;
    std::filesystem::create_directories(iter_dir, ec);
    const auto rank_ckpt = iter_dir / "rank.ckpt";
    const auto reg_ckpt = iter_dir / "reg.ckpt";
    const auto pseudo_csv = iter_dir / "pseudo.csv";
    const auto pred_csv = iter_dir / "pred.csv";

    std::map<std::string, double> pseudo_map;
    for (std::size_t i = 0; i < result.target_ids.size(); ++i) {
      pseudo_map[result.target_ids[i]] = pseudo[i];
    }
    const auto target_pairs =
        select_target_pairs(result.target_ids, pseudo_map, target_lookup, cfg.pairs);

    if (std::filesystem::exists(rank_ckpt)) {
      state = load_checkpoint(rank_ckpt);
    } else {
      Rng rank_rng = stream_rng(cfg.train.seed, stage_stream(kStageRank, iter));
      RankTrainResult r = train_ranking(images, source_pairs, target_pairs, source_scores,
                                        cfg, rank_rng, &result.log, &step_counter, iter);
      state = std::move(r.state);
      save_checkpoint(state, rank_ckpt);
    }
    result.log.checkpoints.push_back(rank_ckpt.string());

    std::vector<double> aggregated;
    if (std::filesystem::exists(pseudo_csv)) {
      const Manifest m = load_manifest(pseudo_csv);
      const auto sm = m.score_map();
      for (const auto& id : result.target_ids) aggregated.push_back(sm.at(id));
    } else {
      aggregated = aggregate_quality(images, result.target_ids, state,
                                     cfg.aggregate_sample, cfg.train.seed);
      save_predictions_csv(result.target_ids, aggregated, pseudo_csv);
    }

    if (std::filesystem::exists(reg_ckpt)) {
      state = load_checkpoint(reg_ckpt);
    } else {
      Rng reg_rng = stream_rng(cfg.train.seed, stage_stream(kStageRegression, iter));
      train_regression(images, result.target_ids, aggregated, state, cfg, reg_rng,
                       &result.log, &step_counter);
      save_checkpoint(state, reg_ckpt);
    }
    result.log.checkpoints.push_back(reg_ckpt.string());

    std::vector<double> preds;
    if (std::filesystem::exists(pred_csv)) {
      const Manifest m = load_manifest(pred_csv);
      const auto sm = m.score_map();
      for (const auto& id : result.target_ids) preds.push_back(sm.at(id));
    } else {
      preds = predict_targets(images, result.target_ids, state);
      save_predictions_csv(result.target_ids, preds, pred_csv);
    }
    result.per_iteration_predictions.push_back(preds);

    if (iter < cfg.train.pipeline_iterations) {
      // Refined pseudo-MOS for re-selection, normalized like iteration 1.
      pseudo = minmax_normalize(preds);
    } else {
      result.predictions = preds;
    }
  }

  result.state = std::move(state);
  save_predictions_csv(result.target_ids, result.predictions, out_dir / "pred.csv");
  save_loss_log(result.log, out_dir / "log.csv");
  save_accuracy_log(result.log, out_dir / "accuracy.csv");
  {
    std::ofstream cfg_out(out_dir / "effective_config.cfg", std::ios::trunc);
    cfg_out << render_config(cfg);
  }
  return result;
}

}  // namespace rankuda
