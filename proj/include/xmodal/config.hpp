#pragma once

#include <cstdint>
#include <string>

#include "xmodal/encoders.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/midi.hpp"
#include "xmodal/optim.hpp"

namespace xmodal {

struct PoolSpec {
    int size = 32;
    int n_queries = 64;
    int n_hard = 8;
    int n_semihard = 4;
};

enum class DescriptorControl { None, Zero, Random, Shuffle };
std::string descriptor_control_name(DescriptorControl c);
DescriptorControl descriptor_control_from(const std::string& s);

struct TrainConfig {
    std::string arm = "d0";
    std::uint64_t seed = 42;
    int epochs = 20;
    int batch_size = 8;
    double base_lr = 3e-4;
    double weight_decay = 0.01;
    LrSchedule schedule{ScheduleKind::Cosine, 30, 15, 0.10, 0.02, 0.7};
    int eval_every_epochs = 2;
    double val_piece_fraction = 0.2; // held-out tail pieces, never trained on
    VicregWeights vicreg;
    CorpusConfig corpus;
    PoolSpec pool;
    DescriptorControl descriptor_control = DescriptorControl::None;

    // dimension overrides applied on top of the arm's toy defaults
    ArmConfig resolved_arm() const;
    ArmConfig arm_overrides; // only dims/embed/dropout fields are honored
    bool has_overrides = false;

    int segment_samples() const {
        return static_cast<int>(corpus.segment_seconds * corpus.sample_rate + 0.5);
    }
};

/// Strict JSON round-trip: unknown keys anywhere are rejected, and a
/// schema_version field is required.
TrainConfig train_config_from_json(const std::string& json_text);
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::string& path);

PoolSpec pool_spec_from_json(const std::string& json_text, std::uint64_t* seed_out = nullptr);

/// FNV-1a digest of the canonical config JSON; embedded in checkpoints and
/// every report for provenance.
std::uint64_t config_hash(const TrainConfig& cfg);
std::string hash_hex(std::uint64_t h);

} // namespace xmodal
