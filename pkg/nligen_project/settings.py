from pathlib import Path
import os
from dotenv import load_dotenv
import sentry_sdk

# Load environment variables
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'nligen-local-only')

DEBUG = os.environ.get('DJANGO_DEBUG', 'False') == 'True'

ALLOWED_HOSTS = os.environ.get('DJANGO_ALLOWED_HOSTS', 'localhost,127.0.0.1').split(',')

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'nli_generator',
]

# The app defines no models.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.environ.get('DB_NAME', os.path.join(BASE_DIR, 'db.sqlite3')),
    }
}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


def _env_float_list(name: str, default: str) -> list:
    return [float(value) for value in os.environ.get(name, default).split(',') if value.strip()]


# NLI generation defaults. Config files and command-line flags override these.
NLIGEN = {
    'HIDDEN_DIM': int(os.environ.get('NLIGEN_HIDDEN_DIM', '150')),
    'LATENT_DIM': int(os.environ.get('NLIGEN_LATENT_DIM', '8')),
    'EMBEDDING_DIM': int(os.environ.get('NLIGEN_EMBEDDING_DIM', '50')),
    'PREMISE_LEN': int(os.environ.get('NLIGEN_PREMISE_LEN', '25')),
    'HYPOTHESIS_LEN': int(os.environ.get('NLIGEN_HYPOTHESIS_LEN', '15')),
    'BATCH_SIZE': int(os.environ.get('NLIGEN_BATCH_SIZE', '64')),
    'GENERATOR_EPOCHS': int(os.environ.get('NLIGEN_GENERATOR_EPOCHS', '20')),
    'CLASSIFIER_MAX_EPOCHS': int(os.environ.get('NLIGEN_CLASSIFIER_MAX_EPOCHS', '100')),
    'DISCRIMINATOR_EPOCHS': int(os.environ.get('NLIGEN_DISCRIMINATOR_EPOCHS', '5')),
    'PATIENCE': int(os.environ.get('NLIGEN_PATIENCE', '3')),
    'LEARNING_RATE': float(os.environ.get('NLIGEN_LEARNING_RATE', '0.001')),
    'CLIP_NORM': float(os.environ.get('NLIGEN_CLIP_NORM', '5.0')),
    'BEAM_SIZE': int(os.environ.get('NLIGEN_BEAM_SIZE', '1')),
    'THRESHOLDS': _env_float_list('NLIGEN_THRESHOLDS', '0.0,0.3,0.6,0.9'),
    'MERGE_THRESHOLD': float(os.environ.get('NLIGEN_MERGE_THRESHOLD', '0.6')),
    'OVERSAMPLE': float(os.environ.get('NLIGEN_OVERSAMPLE', '3.0')),
    'UNKNOWN_EMBEDDING_STD': float(os.environ.get('NLIGEN_UNKNOWN_EMBEDDING_STD', '0.1')),
    'LATENT_INIT_STD': float(os.environ.get('NLIGEN_LATENT_INIT_STD', '0.05')),
    'WORKERS': int(os.environ.get('NLIGEN_WORKERS', str(os.cpu_count() or 1))),
    'SEED': int(os.environ.get('NLIGEN_SEED', '7')),
    'CHECKPOINT_DTYPE': os.environ.get('NLIGEN_CHECKPOINT_DTYPE', 'f64'),
}

# Sentry configuration for error tracking
if os.environ.get('SENTRY_DSN'):
    sentry_sdk.init(
        dsn=os.environ.get('SENTRY_DSN'),
        traces_sample_rate=0.0,
    )

# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'INFO',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': os.getenv('DJANGO_LOG_LEVEL', 'WARNING'),
            'propagate': False,
        },
        'nli_generator': {
            'handlers': ['console'],
            'level': os.getenv('NLIGEN_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
