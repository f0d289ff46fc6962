# Service layer: embedding, clustering, routing, model, training, evaluation and ablation.
