"""
User-facing text for the command line
All console output of cli.py is looked up here by key
"""

MESSAGES = {
    # Stage banners
    'stage_start': '▶ {stage} (config {config_hash})',
    'stage_done': '✅ {stage} finished in {seconds:.1f}s',
    'stage_resumed': '↺ {stage}: reusing stored {what}',

    # Data
    'data_loaded': 'Loaded {n} records ({positives} positive) with attributes {attributes}',
    'population_generated': 'Generated population: {n_pop} units, prevalence {prevalence:.3f}; subsample N={n}',
    'population_written': 'Population written to {path}',
    'threshold_resolved': 'Threshold tau = {threshold:.6g} (full-sample FPR target {target})',

    # Models
    'model_fitted': 'Fitted {model}: {draws} draws via {method}, max R-hat {rhat}',
    'model_warning': '⚠️ {model}: {warning}',
    'fallback_summary': '{model}: {fallback} of {total} cell checks fall back to the empirical estimator',
    'best_model': 'best.ll: overall winner {model}',
    'low_ess': '⚠️ {model}: importance weights degenerate (median ESS {ess:.1f}); consider bootstrap.mode=exact',

    # Outputs
    'outputs_written': '📁 Outputs written to {path}',
    'estimates_summary': '{rows} estimates ({missing} undefined cells recorded)',
    'experiment_summary': 'Experiment: {regimes} regimes x {sizes} sizes x {repetitions} repetitions',

    # Errors
    'error_config': '❌ Configuration error: {error}',
    'error_io': '❌ Cannot read or write file: {error}',
    'error_schema': '❌ Data schema error: {error}',
    'error_model': '❌ {error}',
    'error_unexpected': '❌ Unexpected error: {error}',
    'interrupted': 'Interrupted',
    'missing_report': 'No stored report for config {config_hash}; run estimate or run first',
}


def get_text(key: str, **kwargs) -> str:
    """Get message text for a key, formatted with kwargs"""
    text = MESSAGES.get(key, key)

    if kwargs:
        try:
            text = text.format(**kwargs)
        except (KeyError, ValueError):
            pass

    return text
