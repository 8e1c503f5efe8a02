"""Knowledge-graph query answering under poisoning and query perturbation."""
from .graph import EntityQuery, KnowledgeGraph, RelationQuery, TriggerPattern
from .boxes import BoxModel, answer_entity_queries
from .training import TrainConfig, train_entity_model
from .attacks import AttackConfig, co_optimize, kp_attack, qp_attack
from .defense import DefenseConfig, adversarial_training, filter_and_retrain, integrated_defense
from .metrics import hit_at_k, mrr, ndcg_at_k

__version__ = "0.1.0"
