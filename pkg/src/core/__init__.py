"""Black-box forest, attributions, tree distance, prototype selection and alike parts."""
