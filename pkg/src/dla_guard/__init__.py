"""Dense-layer activation alarms that detect adversarial examples against image classifiers."""
