//! Model-free actor-critic baselines on the same environment: a clipped
//! policy-gradient learner (PPO) and a twin delayed deterministic one (TD3),
//! both with a convolutional encoder over the density field.

pub mod conv;
pub mod nets;
pub mod obs;
pub mod ppo;
pub mod rollout;
pub mod td3;
mod trainer;

pub use nets::{Actor, ConvArch, ValueHead, ACTION_DIM};
pub use obs::{channel_count, observe, EmaNormalizer};
pub use ppo::{PpoConfig, PpoStats};
pub use rollout::{collect_episodes, EpisodeData, Exploration, TransitionBatch};
pub use td3::{ReplayBuffer, Td3Agent, Td3Config, Td3Stats};
pub use trainer::{
    actor_policy, load_policy, save_policy, validate_policy, PpoTrainer, RlConfig, RlRound,
    Td3Trainer,
};
